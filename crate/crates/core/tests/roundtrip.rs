use insmix::bank::InstanceBank;
use insmix::dataset::{label_path_for, load_dir, load_labeled_image, save_labeled_image, LabeledImage};
use insmix::gan::{GanConfig, GanParams};
use insmix::rng;
use insmix::synth::{synth_dataset, SynthConfig};
use insmix::tensor::{read_checkpoint, write_checkpoint, Tensor};
use proptest::prelude::*;

fn arb_image() -> impl Strategy<Value = LabeledImage> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(any::<u8>(), w * h * 3),
            proptest::collection::vec(prop_oneof![Just(0u16), 1u16..4, Just(u16::MAX)], w * h),
        )
            .prop_map(move |(px, lb)| LabeledImage::new("p", w, h, px, lb).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn png_pair_round_trips(img in arb_image()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        save_labeled_image(&img, &p, &label_path_for(&p)).unwrap();
        let back = load_labeled_image(&p, &label_path_for(&p)).unwrap();
        prop_assert_eq!(back.pixels(), img.pixels());
        prop_assert_eq!(back.labels(), img.labels());
    }

    #[test]
    fn checkpoint_round_trips(
        shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..4), 0..5),
        seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed);
        let tensors: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("t{i}"), Tensor::randn(s, 3.0, &mut r)))
            .collect();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &tensors).unwrap();
        prop_assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), tensors);
    }
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let tensors = vec![("w".to_string(), Tensor::full(&[2, 3], 1.5))];
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &tensors).unwrap();
    for cut in [0, 4, 12, buf.len() - 1] {
        assert!(read_checkpoint(&buf[..cut]).is_err(), "cut at {cut}");
    }
}

#[test]
fn bank_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    for img in synth_dataset(3, &SynthConfig::default(), 11) {
        let p = dir.path().join(format!("{}.png", img.id));
        save_labeled_image(&img, &p, &label_path_for(&p)).unwrap();
    }
    let bank = InstanceBank::build(&load_dir(dir.path()).unwrap()).unwrap();
    let path = dir.path().join("bank.jsonl");
    bank.save_jsonl(&path).unwrap();
    let back = InstanceBank::load_jsonl(&path).unwrap();
    assert_eq!(back.entries(), bank.entries());
    assert_eq!(back.area_index(), bank.area_index());
}

#[test]
fn generator_weights_survive_checkpoint() {
    let cfg = GanConfig {
        base_channels: 2,
        disc_channels: 2,
        ..GanConfig::default()
    };
    let params = GanParams::init(&cfg, &mut rng::stream(4)).unwrap();
    let records = params.to_records();
    let back = GanParams::from_records(&records, cfg.spectral_iterations).unwrap();
    assert_eq!(back.generator, params.generator);
    assert_eq!(back.discriminator, params.discriminator);
}
