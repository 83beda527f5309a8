#![no_main]

use libfuzzer_sys::fuzz_target;
use mvfbsde::io::read_paths_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = read_paths_csv(data) {
        assert_eq!(table.values.len(), table.paths * table.nodes);
        for c in 0..8 {
            assert_eq!(table.column(c).dim(), (table.paths, table.nodes));
        }
    }
});
