//! Replays the checked-in fuzz seeds, plus random input, through the parser
//! entry points with the same checks the fuzz targets make.

use std::fs;
use std::path::{Path, PathBuf};

use dsgcqr::config::KeyValues;
use dsgcqr::io::{parse_matrix_csv, Manifest};
use dsgcqr::Graph;
use proptest::prelude::*;

fn edge_list(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(g) = Graph::from_edge_list(text) {
        let again = Graph::from_edge_list(&g.to_edge_list()).expect("written edge lists parse");
        assert_eq!(g, again);
    }
}

fn manifest(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = Manifest::parse(text) {
        assert_eq!(Manifest::parse(&m.to_text()).expect("round trip"), m);
    }
}

fn config(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(kv) = KeyValues::parse(text) {
        for e in kv.entries() {
            let _ = kv.get::<f64>(&e.key);
        }
    }
}

fn csv_matrix(data: &[u8]) {
    if let Ok(t) = parse_matrix_csv(data, Path::new("fuzz.csv")) {
        assert_eq!(t.header.len(), t.data.ncols());
    }
}

const TARGETS: [(&str, fn(&[u8])); 4] = [
    ("edge_list", edge_list),
    ("manifest", manifest),
    ("config", config),
    ("csv_matrix", csv_matrix),
];

fn corpus(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target)
}

#[test]
fn checked_in_seeds_replay_cleanly() {
    for (name, run) in TARGETS {
        let mut seen = 0;
        for entry in fs::read_dir(corpus(name)).unwrap() {
            let path = entry.unwrap().path();
            run(&fs::read(&path).unwrap());
            seen += 1;
        }
        assert!(seen >= 3, "{name} has only {seen} seeds");
    }
}

#[test]
fn seeds_include_accepted_and_rejected_inputs() {
    let read = |t: &str, f: &str| fs::read_to_string(corpus(t).join(f)).unwrap();
    assert!(Graph::from_edge_list(&read("edge_list", "line4")).is_ok());
    assert!(Graph::from_edge_list(&read("edge_list", "out_of_range")).is_err());
    assert!(Manifest::parse(&read("manifest", "basic")).is_ok());
    assert!(Manifest::parse(&read("manifest", "bad_path")).is_err());
    assert!(KeyValues::parse(&read("config", "sections")).is_ok());
    assert!(KeyValues::parse(&read("config", "duplicate")).is_err());
    assert!(parse_matrix_csv(read("csv_matrix", "two_cols").as_bytes(), Path::new("x")).is_ok());
    assert!(parse_matrix_csv(read("csv_matrix", "ragged").as_bytes(), Path::new("x")).is_err());
}

fn mutated_seed() -> impl Strategy<Value = (usize, Vec<u8>)> {
    (
        0..TARGETS.len(),
        proptest::collection::vec((any::<u8>(), any::<bool>()), 0..24),
        any::<usize>(),
    )
        .prop_map(|(t, edits, pick)| {
            let mut seeds: Vec<PathBuf> = fs::read_dir(corpus(TARGETS[t].0))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            seeds.sort();
            let mut bytes = fs::read(&seeds[pick % seeds.len()]).unwrap();
            for (i, (b, insert)) in edits.into_iter().enumerate() {
                let at = (pick.wrapping_add(i * 7919)) % (bytes.len() + 1);
                if insert || at == bytes.len() {
                    bytes.insert(at, b);
                } else {
                    bytes[at] = b;
                }
            }
            (t, bytes)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn random_bytes_never_panic(t in 0..TARGETS.len(), data in proptest::collection::vec(any::<u8>(), 0..256)) {
        (TARGETS[t].1)(&data);
    }

    #[test]
    fn mutated_seeds_never_panic((t, data) in mutated_seed()) {
        (TARGETS[t].1)(&data);
    }

    #[test]
    fn digit_soup_never_panics(t in 0..TARGETS.len(), text in "[0-9 ,.=:#;\\[\\]a-z_\\n-]{0,120}") {
        (TARGETS[t].1)(text.as_bytes());
    }
}
