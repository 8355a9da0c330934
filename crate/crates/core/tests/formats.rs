mod common;

use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uwb_rff::autodiff::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
use uwb_rff::datastore::{
    decode_dataset, encode_dataset, make_split, read_dataset, synth_generate, write_dataset, ScenarioKind, ScenarioSplit,
    SplitParams, SynthConfig,
};
use uwb_rff::encoders::{load_model, save_model, FingerprintModel, LabelMap, ModelConfig, ModelSidecar};
use uwb_rff::reid::{build_gallery, Gallery};
use uwb_rff::Error;

fn small_synth() -> uwb_rff::datastore::Dataset {
    synth_generate(&SynthConfig {
        per_cell: 2,
        num_devices: 3,
        num_locations: 2,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn dataset_round_trip_and_corruption() {
    let ds = small_synth();
    let bytes = encode_dataset(&ds.meta, &ds.records).unwrap();
    let back = decode_dataset(&bytes).unwrap();
    assert_eq!(back.records, ds.records);
    assert_eq!(back.meta, ds.meta);
    assert_eq!(encode_dataset(&back.meta, &back.records).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.uwbf");
    write_dataset(&ds.meta, &ds.records, &p).unwrap();
    assert_eq!(fs::read(&p).unwrap(), bytes);
    assert_eq!(read_dataset(&p).unwrap().records, ds.records);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
    for cut in [0, 3, 4, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_dataset(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_dataset(&long), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let model = ModelConfig::default().init(4).unwrap();
    let bytes = encode_checkpoint(model.params()).unwrap();
    let back = decode_checkpoint(&bytes).unwrap();
    for ((na, a), (nb, b)) in model.params().iter().zip(back.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape, b.shape);
        assert_eq!(a.values, b.values);
    }
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bin");
    write_checkpoint(&back, &p).unwrap();
    assert_eq!(fs::read(&p).unwrap(), bytes);
    assert_eq!(encode_checkpoint(&read_checkpoint(&p).unwrap()).unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { .. })));
    for cut in [0, 5, 12, bytes.len() - 3] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })), "cut at {cut}");
    }

    // model artifact: checkpoint plus JSON sidecar
    let side = ModelSidecar {
        model: model.config(),
        labels: LabelMap::from_devices([3, 1, 2]),
        stft: Default::default(),
        hyper: Default::default(),
        history: Default::default(),
    };
    let q = dir.path().join("model.bin");
    save_model(&q, &model, &side).unwrap();
    let (loaded, loaded_side) = load_model(&q).unwrap();
    assert_eq!(loaded_side, side);
    assert_eq!(encode_checkpoint(loaded.params()).unwrap(), bytes);
}

#[test]
fn split_round_trip_and_corruption() {
    let ds = small_synth();
    let split = make_split(&ds.records, ScenarioKind::S2, &SplitParams { holdout_locations: 1, ..Default::default() }).unwrap();
    let text = split.to_json().unwrap();
    let back = ScenarioSplit::from_json(&text).unwrap();
    assert_eq!(back, split);
    assert_eq!(back.to_json().unwrap(), text);
    assert!(matches!(ScenarioSplit::from_json(&text[..text.len() / 2]), Err(Error::Json(_))));
    assert!(ScenarioSplit::from_json(&text.replace("train_idx", "training")).is_err());
}

#[test]
fn gallery_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let embs: Vec<_> = (0..12).map(|_| common::random_unit(192, &mut rng)).collect();
    let labels: Vec<u16> = (0..12).map(|i| (i % 5) as u16).collect();
    let gallery = build_gallery(&embs, &labels).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.json");
    gallery.save(&p).unwrap();
    let loaded = Gallery::load(&p).unwrap();
    assert_eq!(loaded, gallery);
    let q = dir.path().join("g2.json");
    loaded.save(&q).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());

    let text = fs::read_to_string(&p).unwrap();
    assert!(matches!(Gallery::from_json(&text[..text.len() - 2]), Err(Error::Json(_))));
    assert!(Gallery::from_json(r#"{"1": [3.0, 4.0]}"#).is_err(), "non-unit reference");
}
