use std::collections::BTreeMap;
use std::fs;

use spatialkd::model::{ConvClassifier, ConvNetConfig, MANIFEST_FILE};
use spatialkd::synthdata::{self, SynthConfig, MANIFEST_NAME};
use spatialkd::{container, Error, Tensor};

fn small_config() -> SynthConfig {
    SynthConfig {
        samples_per_class: 4,
        folds: 2,
        master_seed: 11,
        ..SynthConfig::default()
    }
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let built = synthdata::generate(&small_config(), dir.path()).unwrap();
    let loaded = synthdata::load(dir.path()).unwrap();
    assert_eq!(built.config, loaded.config);
    assert_eq!(built.samples.len(), loaded.samples.len());
    for (a, b) in built.samples.iter().zip(&loaded.samples) {
        assert_eq!(a.entry, b.entry);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.full_image), bits(&b.full_image));
        assert_eq!(bits(&a.cropped_image), bits(&b.cropped_image));
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = ConvNetConfig {
        init_seed: 5,
        ..ConvNetConfig::default()
    };
    let model = ConvClassifier::<f32>::init(config.clone()).unwrap();
    model.save_checkpoint(dir.path(), &BTreeMap::new()).unwrap();
    let back = ConvClassifier::<f32>::load_checkpoint(dir.path(), &config).unwrap();
    assert_eq!(model.params(), back.params());

    let image = Tensor::new(vec![1, 64, 64], (0..64 * 64).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
    assert_eq!(model.logits(&image).unwrap(), back.logits(&image).unwrap());
}

#[test]
fn checkpoint_manifest_lists_each_parameter_once() {
    let dir = tempfile::tempdir().unwrap();
    let model = ConvClassifier::<f32>::init(ConvNetConfig::default()).unwrap();
    model.save_checkpoint(dir.path(), &BTreeMap::new()).unwrap();
    let (_, manifest) = ConvClassifier::<f32>::load_checkpoint_with_manifest(dir.path()).unwrap();
    let mut names: Vec<_> = manifest.parameters.iter().map(|p| p.name.clone()).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
    assert_eq!(n, model.param_names().len());
}

#[test]
fn checkpoint_with_wrong_class_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = ConvClassifier::<f32>::init(ConvNetConfig::default()).unwrap();
    model.save_checkpoint(dir.path(), &BTreeMap::new()).unwrap();
    let wrong = ConvNetConfig {
        num_classes: 4,
        ..ConvNetConfig::default()
    };
    let err = ConvClassifier::<f32>::load_checkpoint(dir.path(), &wrong).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn corrupt_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.dtk");
    container::write(&path, &Tensor::<f32>::zeros(vec![2, 3])).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, bytes).unwrap();
    let err = container::read::<f32>(&path).unwrap_err();
    assert!(matches!(err, Error::CorruptContainer { .. }), "{err}");
    assert!(err.is_data_error());
}

#[test]
fn truncated_container_is_rejected() {
    let bytes = container::encode(&Tensor::<f64>::full(vec![4], 1.5));
    for cut in [0, 3, 8, 12, bytes.len() - 1] {
        let err = container::decode::<f64>(&bytes[..cut], "mem".as_ref()).unwrap_err();
        assert!(matches!(err, Error::CorruptContainer { .. }), "cut {cut}: {err}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(container::decode::<f64>(&long, "mem".as_ref()).is_err());
}

#[test]
fn dtype_mismatch_is_rejected() {
    let bytes = container::encode(&Tensor::<f64>::full(vec![4], 1.5));
    assert!(matches!(
        container::decode::<f32>(&bytes, "mem".as_ref()),
        Err(Error::CorruptContainer { .. })
    ));
}

#[test]
fn missing_sample_file_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthdata::generate(&small_config(), dir.path()).unwrap();
    let id = ds.samples[3].id().to_string();
    let victim = fs::read_dir(dir.path().join("samples"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(&id))
        .unwrap();
    fs::remove_file(victim).unwrap();
    match synthdata::load(dir.path()).unwrap_err() {
        Error::MissingFile { id: got, .. } => assert_eq!(got, id),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn malformed_manifest_is_corrupt_data() {
    let dir = tempfile::tempdir().unwrap();
    synthdata::generate(&small_config(), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    fs::write(&path, lines.join("\n")).unwrap();
    let err = synthdata::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Corrupt(_)), "{err}");

    fs::write(&path, "not json\n").unwrap();
    assert!(matches!(synthdata::load(dir.path()), Err(Error::Corrupt(_))));
}

#[test]
fn corrupt_checkpoint_manifest_is_corrupt_data() {
    let dir = tempfile::tempdir().unwrap();
    let model = ConvClassifier::<f32>::init(ConvNetConfig::default()).unwrap();
    model.save_checkpoint(dir.path(), &BTreeMap::new()).unwrap();
    fs::write(dir.path().join(MANIFEST_FILE), "{").unwrap();
    let err = ConvClassifier::<f32>::load_checkpoint_with_manifest(dir.path()).unwrap_err();
    assert!(err.is_data_error(), "{err}");
}
