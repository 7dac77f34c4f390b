use std::collections::BTreeMap;

use evostruct::cache;
use evostruct::checkpoint::{config_hash, Checkpoint, CheckpointMeta};
use evostruct::dump::{read_dump, write_dump, PredictionDump};
use evostruct::manifest::{entry_for, DatasetManifest};
use evostruct::pdb::{build_complex, parse_pdb, write_pdb};
use evostruct_core::aa::{sequence_string, AminoAcid, NUM_AA};
use evostruct_core::config::RunConfig;
use evostruct_core::structure::CdrName;
use evostruct_core::synth::{synth_complex, SynthConfig};
use evostruct_core::{Mat, ParamStore, RngStream};
use proptest::prelude::*;

fn f32_mat(max: usize) -> impl Strategy<Value = Mat> {
    (1..max, 1..max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1e4f32..1e4, r * c)
            .prop_map(move |v| Mat::from_vec(r, c, v.into_iter().map(f64::from).collect()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn evoc_round_trips_and_rejects_truncation(m in f32_mat(12)) {
        let bytes = cache::encode(&m);
        prop_assert_eq!(cache::decode(&bytes).unwrap(), m);
        prop_assert!(cache::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trips(mats in prop::collection::vec(f32_mat(6), 1..5), seed in any::<u64>()) {
        let mut store = ParamStore::new();
        for (k, m) in mats.iter().enumerate() {
            store.add(&format!("p{k}.w"), m.clone());
        }
        let cfg = RunConfig { seed, ..Default::default() };
        let meta = CheckpointMeta { phase: 1, epoch: 3, seed, config_hash: config_hash(&cfg), config: cfg.clone() };
        let ck = Checkpoint::from_store(&store, meta);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        prop_assert_eq!(&back, &ck);
        back.verify_config(&cfg).unwrap();
    }

    #[test]
    fn pdb_round_trips_synthetic_complexes(seed in any::<u64>(), light in 0usize..12, antigen in 6usize..20) {
        let cfg = SynthConfig { heavy_len: 18, light_len: light, antigen_len: antigen, h3_len_min: 4, h3_len_max: 6, planted_contacts: 3, ..Default::default() };
        let mut c = synth_complex(&mut RngStream::new(seed), "rt", &cfg);
        for r in c.heavy.iter_mut().chain(&mut c.light).chain(&mut c.antigen) {
            for p in r.backbone.iter_mut().flatten() {
                *p = (*p * 1000.0).round() / 1000.0;
            }
        }
        let text = write_pdb(&c);
        let entry = entry_for(&c, "rt.pdb");
        let back = build_complex(&parse_pdb(&text).unwrap(), &entry, CdrName::H3, cfg.contact_cutoff).unwrap();
        prop_assert_eq!(back.dropped, 0);
        prop_assert_eq!(&back.complex, &c);
    }

    #[test]
    fn dumps_round_trip(seq in prop::collection::vec(0..NUM_AA, 1..15), with_logits in any::<bool>()) {
        let seq: Vec<AminoAcid> = seq.into_iter().map(|i| AminoAcid::from_index(i).unwrap()).collect();
        let d = PredictionDump {
            id: "x".into(),
            cdr: CdrName::H3,
            predicted_seq: sequence_string(&seq),
            per_position_logits: with_logits.then(|| seq.iter().map(|a| (0..NUM_AA).map(|k| if k == a.index() { 1.5 } else { -0.25 }).collect()).collect()),
            predicted_cdr_coords: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = write_dump(dir.path(), &d).unwrap();
        let back = read_dump(&path).unwrap();
        prop_assert_eq!(back.sequence().unwrap(), seq);
        prop_assert_eq!(back, d);
    }
}

#[test]
fn manifest_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth_complex(&mut RngStream::new(3), "m1", &SynthConfig::default());
    let m = DatasetManifest {
        entries: vec![entry_for(&c, "m1.pdb")],
    };
    let path = dir.path().join("manifest.json");
    m.save(&path).unwrap();
    let back = DatasetManifest::load(&path).unwrap();
    assert_eq!(back, m);
    let ranges: BTreeMap<CdrName, [usize; 2]> = back.entries[0].cdr_ranges.clone();
    assert_eq!(ranges.len(), 1);
}
