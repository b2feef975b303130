//! Numeric CSV reader used for machine, response and fit files.

#![no_main]

use std::path::Path;

use dsgcqr::io::parse_matrix_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = parse_matrix_csv(data, Path::new("fuzz.csv")) {
        assert_eq!(t.header.len(), t.data.ncols());
    }
});
