//! Hand-written loss gradients for the two network types. They compute the
//! same quantities as recording the forward pass on a [`Tape`](super::Tape)
//! but without per-operation allocation.

use ndarray::{Array2, ArrayView2};

use super::kernels::{column_sums, sigmoid, tanh};
use super::nets::{Activation, FeedForwardNet, GruNet};
use crate::error::{Error, Result};

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

#[inline(always)]
fn activate_generic(act: Activation, v: &mut [f64]) {
    match act {
        Activation::Tanh => v.iter_mut().for_each(|x| *x = tanh(*x)),
        Activation::Sigmoid => v.iter_mut().for_each(|x| *x = sigmoid(*x)),
    }
}

/// Same arithmetic with wider vectors; no fused multiply-add, so results are
/// bit-identical to the baseline path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn activate_avx2(act: Activation, v: &mut [f64]) {
    activate_generic(act, v)
}

fn activate(act: Activation, v: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { activate_avx2(act, v) };
    }
    activate_generic(act, v)
}

impl FeedForwardNet {
    /// Loss `sum_r loss(r, out_r)` over the rows of `input` and its gradient
    /// in parameter order. `loss` returns the row's contribution and writes
    /// its derivative with respect to the row output.
    pub fn batch_gradient<F>(&self, input: ArrayView2<'_, f64>, mut loss: F) -> Result<(f64, Vec<Array2<f64>>)>
    where
        F: FnMut(usize, &[f64], &mut [f64]) -> f64,
    {
        if input.ncols() != self.input_dim() {
            return Err(Error::dimension("network input columns", self.input_dim(), input.ncols()));
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let act = self.activation();
        let mut acts = Vec::with_capacity(layers.len());
        acts.push(standard(input.to_owned()));
        for (i, layer) in layers.iter().enumerate() {
            let mut h = standard(acts[i].dot(&layer.weight));
            let bias = layer.bias.as_slice().expect("bias rows are contiguous");
            for row in h.as_slice_mut().expect("standard layout").chunks_exact_mut(bias.len()) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
            if i < last {
                activate(act, h.as_slice_mut().expect("standard layout"));
            }
            acts.push(h);
        }

        let out = &acts[layers.len()];
        let mut delta = Array2::zeros(out.dim());
        let mut total = 0.0;
        for (r, (o, mut d)) in out.rows().into_iter().zip(delta.rows_mut()).enumerate() {
            let (o, d) = (o.as_slice().expect("row-major"), d.as_slice_mut().expect("row-major"));
            total += loss(r, o, d);
        }

        let mut grads = vec![Array2::zeros((0, 0)); 2 * layers.len()];
        for i in (0..layers.len()).rev() {
            grads[2 * i] = acts[i].t().dot(&delta);
            grads[2 * i + 1] = column_sums(&delta);
            if i > 0 {
                let mut prev = standard(delta.dot(&layers[i].weight.t()));
                let a = acts[i].as_slice().expect("standard layout");
                let d = prev.as_slice_mut().expect("standard layout");
                match act {
                    Activation::Tanh => d.iter_mut().zip(a).for_each(|(d, a)| *d *= 1.0 - a * a),
                    Activation::Sigmoid => d.iter_mut().zip(a).for_each(|(d, a)| *d *= a * (1.0 - a)),
                }
                delta = prev;
            }
        }
        Ok((total, grads))
    }
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

#[inline(always)]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (u, v) in y.iter_mut().zip(x) {
        *u += a * v;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline(always)]
fn dotv(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline(always)]
fn sumv(x: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let xc = x.chunks_exact(4);
    let tail: f64 = xc.remainder().iter().sum();
    for a in xc {
        for l in 0..4 {
            acc[l] += a[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl GruNet {
    /// Loss `sum_r sum_j loss(r, j, y_rj)` for the source rows `rows` of
    /// `features` (and `extras`, if any), with the gradient in parameter
    /// order. Loops run over the batch, one gate unit at a time.
    pub fn sequence_gradient<F>(
        &self,
        features: &[Array2<f64>],
        extras: Option<&[Array2<f64>]>,
        rows: &[usize],
        loss: F,
    ) -> Result<(f64, Vec<Array2<f64>>)>
    where
        F: FnMut(usize, usize, &[f64], &mut [f64]) -> f64,
    {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { self.sequence_gradient_avx2(features, extras, rows, loss) };
        }
        self.sequence_gradient_body(features, extras, rows, loss)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn sequence_gradient_avx2<F>(
        &self,
        features: &[Array2<f64>],
        extras: Option<&[Array2<f64>]>,
        rows: &[usize],
        loss: F,
    ) -> Result<(f64, Vec<Array2<f64>>)>
    where
        F: FnMut(usize, usize, &[f64], &mut [f64]) -> f64,
    {
        self.sequence_gradient_body(features, extras, rows, loss)
    }

    #[inline(always)]
    fn sequence_gradient_body<F>(
        &self,
        features: &[Array2<f64>],
        extras: Option<&[Array2<f64>]>,
        rows: &[usize],
        mut loss: F,
    ) -> Result<(f64, Vec<Array2<f64>>)>
    where
        F: FnMut(usize, usize, &[f64], &mut [f64]) -> f64,
    {
        let shape = self.shape();
        let steps = features.len();
        if steps == 0 {
            return Err(Error::Usage("GRU needs a non-empty feature sequence".into()));
        }
        let paths = features[0].nrows();
        for f in features {
            if f.dim() != (paths, shape.input_dim) {
                return Err(Error::dimension(
                    "GRU step features",
                    format!("({paths}, {})", shape.input_dim),
                    format!("{:?}", f.dim()),
                ));
            }
        }
        match extras {
            Some(ex) if ex.len() != steps || ex.iter().any(|e| e.dim() != (paths, shape.extra_dim)) => {
                return Err(Error::dimension("GRU head inputs", steps, ex.len()));
            }
            None if shape.extra_dim > 0 => return Err(Error::Usage("GRU head expects extra inputs".into())),
            _ => {}
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= paths) {
            return Err(Error::dimension("GRU row index bound", paths, bad));
        }

        let (ni, nh, ne, no) = (shape.input_dim, shape.hidden_dim, shape.extra_dim, shape.output_dim);
        let nb = rows.len();
        let w_i = [flat(&self.w_ir), flat(&self.w_iz), flat(&self.w_in)];
        let w_h = [flat(&self.w_hr), flat(&self.w_hz), flat(&self.w_hn)];
        let b_i = [flat(&self.b_ir), flat(&self.b_iz), flat(&self.b_in)];
        let b_h = [flat(&self.b_hr), flat(&self.b_hz), flat(&self.b_hn)];
        let head_w = flat(&self.head_w);
        let head_extra = flat(&self.head_extra);
        let head_b = flat(&self.head_b);

        // Column-major gathers: entry `(j * width + c) * nb + b`.
        let gather = |src: &[Array2<f64>], width: usize| {
            let mut out = vec![0.0; steps * width * nb];
            for (j, m) in src.iter().enumerate() {
                for (b, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        out[(j * width + c) * nb + b] = m[[r, c]];
                    }
                }
            }
            out
        };
        let xs = gather(features, ni);
        let es = extras.map(|e| gather(e, ne)).unwrap_or_default();
        let at = |j: usize, width: usize, c: usize| (j * width + c) * nb;

        // Caches per step and hidden unit: r, z, n, h W_hn + b_hn, hidden
        // state (offset by one step, `hs[0]` is the zero start).
        let size = steps * nh * nb;
        let (mut rs, mut zs, mut ns, mut hns) = (vec![0.0; size], vec![0.0; size], vec![0.0; size], vec![0.0; size]);
        let mut hs = vec![0.0; (steps + 1) * nh * nb];
        let mut dys = vec![0.0; steps * no * nb];
        let mut y = vec![0.0; no];
        let mut dy = vec![0.0; no];
        let mut out = vec![0.0; no * nb];
        let mut total = 0.0;

        for j in 0..steps {
            let (past, rest) = hs.split_at_mut((j + 1) * nh * nb);
            let hp = &past[j * nh * nb..];
            let hnew = &mut rest[..nh * nb];
            for k in 0..nh {
                let cell = (j * nh + k) * nb..(j * nh + k + 1) * nb;
                for (g, buf) in [&mut rs, &mut zs].into_iter().enumerate() {
                    let pre = &mut buf[cell.clone()];
                    pre.fill(b_i[g][k] + b_h[g][k]);
                    for a in 0..ni {
                        let o = at(j, ni, a);
                        axpy(pre, w_i[g][a * nh + k], &xs[o..o + nb]);
                    }
                    for c in 0..nh {
                        axpy(pre, w_h[g][c * nh + k], &hp[c * nb..(c + 1) * nb]);
                    }
                    pre.iter_mut().for_each(|v| *v = sigmoid(*v));
                }
                let hn = &mut hns[cell.clone()];
                hn.fill(b_h[2][k]);
                for c in 0..nh {
                    axpy(hn, w_h[2][c * nh + k], &hp[c * nb..(c + 1) * nb]);
                }
                let n = &mut ns[cell.clone()];
                n.fill(b_i[2][k]);
                for a in 0..ni {
                    let o = at(j, ni, a);
                    axpy(n, w_i[2][a * nh + k], &xs[o..o + nb]);
                }
                let (r, z) = (&rs[cell.clone()], &zs[cell.clone()]);
                let hk = &hp[k * nb..(k + 1) * nb];
                let hw = &mut hnew[k * nb..(k + 1) * nb];
                for b in 0..nb {
                    let nv = tanh(n[b] + r[b] * hn[b]);
                    n[b] = nv;
                    hw[b] = nv + z[b] * (hk[b] - nv);
                }
            }
            for o in 0..no {
                let ob = &mut out[o * nb..(o + 1) * nb];
                ob.fill(head_b[o]);
                for k in 0..nh {
                    axpy(ob, head_w[k * no + o], &hnew[k * nb..(k + 1) * nb]);
                }
                for c in 0..ne {
                    let e = at(j, ne, c);
                    axpy(ob, head_extra[c * no + o], &es[e..e + nb]);
                }
            }
            for (b, &row) in rows.iter().enumerate() {
                for o in 0..no {
                    y[o] = out[o * nb + b];
                }
                total += loss(row, j, &y, &mut dy);
                for o in 0..no {
                    dys[(j * no + o) * nb + b] = dy[o];
                }
            }
        }

        let mut g_wi = [vec![0.0; ni * nh], vec![0.0; ni * nh], vec![0.0; ni * nh]];
        let mut g_wh = [vec![0.0; nh * nh], vec![0.0; nh * nh], vec![0.0; nh * nh]];
        let mut g_bi = [vec![0.0; nh], vec![0.0; nh], vec![0.0; nh]];
        let mut g_bh = [vec![0.0; nh], vec![0.0; nh], vec![0.0; nh]];
        let mut g_head_w = vec![0.0; nh * no];
        let mut g_head_extra = vec![0.0; ne * no];
        let mut g_head_b = vec![0.0; no];
        let mut dh = vec![0.0; nh * nb];
        let mut dprev = vec![0.0; nh * nb];
        // Pre-activation gradients per gate; input side and hidden side only
        // differ for the candidate gate, whose hidden term is scaled by r.
        let mut da_in = [vec![0.0; nh * nb], vec![0.0; nh * nb], vec![0.0; nh * nb]];
        let mut da_hid = vec![0.0; nh * nb];

        for j in (0..steps).rev() {
            let hp = &hs[j * nh * nb..(j + 1) * nh * nb];
            let hnew = &hs[(j + 1) * nh * nb..(j + 2) * nh * nb];
            for o in 0..no {
                let d = &dys[(j * no + o) * nb..(j * no + o + 1) * nb];
                g_head_b[o] += sumv(d);
                for k in 0..nh {
                    g_head_w[k * no + o] += dotv(&hnew[k * nb..(k + 1) * nb], d);
                    axpy(&mut dh[k * nb..(k + 1) * nb], head_w[k * no + o], d);
                }
                for c in 0..ne {
                    let e = at(j, ne, c);
                    g_head_extra[c * no + o] += dotv(&es[e..e + nb], d);
                }
            }
            for k in 0..nh {
                let cell = (j * nh + k) * nb;
                let [dr_, dz_, dn_] = &mut da_in;
                let (dar, daz, dan) = (&mut dr_[k * nb..(k + 1) * nb], &mut dz_[k * nb..(k + 1) * nb], &mut dn_[k * nb..(k + 1) * nb]);
                let dhid = &mut da_hid[k * nb..(k + 1) * nb];
                let dp = &mut dprev[k * nb..(k + 1) * nb];
                let dhk = &dh[k * nb..(k + 1) * nb];
                let hk = &hp[k * nb..(k + 1) * nb];
                for b in 0..nb {
                    let (r, z, n, hn) = (rs[cell + b], zs[cell + b], ns[cell + b], hns[cell + b]);
                    let g = dhk[b];
                    let a_n = g * (1.0 - z) * (1.0 - n * n);
                    dan[b] = a_n;
                    dhid[b] = a_n * r;
                    dar[b] = a_n * hn * r * (1.0 - r);
                    daz[b] = g * (hk[b] - n) * z * (1.0 - z);
                    dp[b] = g * z;
                }
            }
            for g in 0..3 {
                for k in 0..nh {
                    let d_in = &da_in[g][k * nb..(k + 1) * nb];
                    let d_h = if g == 2 { &da_hid[k * nb..(k + 1) * nb] } else { d_in };
                    g_bi[g][k] += sumv(d_in);
                    g_bh[g][k] += sumv(d_h);
                    for a in 0..ni {
                        let o = at(j, ni, a);
                        g_wi[g][a * nh + k] += dotv(&xs[o..o + nb], d_in);
                    }
                    for c in 0..nh {
                        g_wh[g][c * nh + k] += dotv(&hp[c * nb..(c + 1) * nb], d_h);
                        axpy(&mut dprev[c * nb..(c + 1) * nb], w_h[g][c * nh + k], d_h);
                    }
                }
            }
            std::mem::swap(&mut dh, &mut dprev);
        }

        let mat = |r: usize, c: usize, v: Vec<f64>| Array2::from_shape_vec((r, c), v).expect("sized above");
        let [gwr, gwz, gwn] = g_wi;
        let [ghr, ghz, ghn] = g_wh;
        let [gbir, gbiz, gbin] = g_bi;
        let [gbhr, gbhz, gbhn] = g_bh;
        let grads = vec![
            mat(ni, nh, gwr),
            mat(ni, nh, gwz),
            mat(ni, nh, gwn),
            mat(nh, nh, ghr),
            mat(nh, nh, ghz),
            mat(nh, nh, ghn),
            mat(1, nh, gbir),
            mat(1, nh, gbiz),
            mat(1, nh, gbin),
            mat(1, nh, gbhr),
            mat(1, nh, gbhz),
            mat(1, nh, gbhn),
            mat(nh, no, g_head_w),
            mat(ne, no, g_head_extra),
            mat(1, no, g_head_b),
        ];
        Ok((total, grads))
    }
}
