use m3net::fixtures::{toy_config, toy_splits};
use m3net::model::{load_checkpoint, save_checkpoint};
use m3net::{Checkpoint, Error, M3Net, Tensor, Variant};

fn trained(variant: Variant) -> (M3Net<f32>, m3net::Splits) {
    let cfg = toy_config(variant, 8);
    let splits = toy_splits(&cfg, 400, 8).unwrap();
    let mut model = M3Net::<f32>::new(cfg).unwrap();
    let tc = m3net::TrainConfig {
        max_epochs: 2,
        batch_size: 32,
        ..Default::default()
    };
    m3net::trainer::train(&mut model, &splits, &tc).unwrap();
    (model, splits)
}

fn bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    ckpt.write_to(&mut out).unwrap();
    out
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let (model, splits) = trained(variant);
        let path = dir.path().join(format!("{variant}.m3ckpt"));
        save_checkpoint(&model, Some(&splits.stats), &path).unwrap();
        let (back, stats) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(stats.as_ref(), Some(&splits.stats));
        assert_eq!(back.store().snapshot(), model.store().snapshot());
        let x: Tensor<f32> = splits.test.sample(0).x;
        assert_eq!(back.forward(&x, 10, 3).unwrap(), model.forward(&x, 10, 3).unwrap());
        let again = bytes(&Checkpoint::from_model(&back, stats.as_ref()));
        assert_eq!(again, std::fs::read(&path).unwrap());
    }
}

#[test]
fn variant_is_recorded() {
    let (model, _) = trained(Variant::NoMoe);
    let back = Checkpoint::read_from(&mut bytes(&Checkpoint::from_model(&model, None)).as_slice()).unwrap();
    assert_eq!(back.config.variant, Variant::NoMoe);
    assert_eq!(back.config.experts, 1);
    assert!(back.stats.is_none());
}

#[test]
fn damaged_files_are_rejected() {
    let (model, splits) = trained(Variant::Full);
    let good = bytes(&Checkpoint::from_model(&model, Some(&splits.stats)));
    let read = |b: &[u8]| Checkpoint::read_from(&mut &b[..]);

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read(&bad_magic), Err(Error::Corrupt(_))));

    let mut future = good.clone();
    future[10..14].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(read(&future), Err(Error::Incompatible(_))));

    for cut in [3, 12, 40, good.len() / 2, good.len() - 1] {
        assert!(matches!(read(&good[..cut]), Err(Error::Corrupt(_))), "cut at {cut}");
    }

    // dropping the last parameter entirely leaves a well-formed file that
    // no longer matches its config
    let last = model.store().iter().last().unwrap();
    let entry = 4 + last.name.len() + 1 + 4 * last.value.rank() + 4 * last.value.len();
    let short = Checkpoint::read_from(&mut &good[..good.len() - entry]).unwrap();
    assert!(matches!(short.to_model::<f32>(), Err(Error::Corrupt(_))));

    assert!(read(b"").is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let err = Checkpoint::load(std::path::Path::new("/nonexistent/model.m3ckpt")).unwrap_err();
    assert!(matches!(err, Error::Io(_)));
}
