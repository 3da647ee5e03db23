use banglagan::damsm::{train_damsm, DamsmConfig};
use banglagan::encoders::EncoderConfig;
use banglagan::textdata::toy::ToySpec;
use banglagan::textdata::{corpus_tokens, prepare_examples, split_dataset, Vocabulary};
use banglagan::Error;

fn toy_split(n: usize) -> (banglagan::textdata::DatasetSplit<banglagan::textdata::Example>, usize) {
    let dir = tempfile::tempdir().unwrap();
    let samples = banglagan::textdata::toy::write_toy_dataset(dir.path(), &ToySpec { n_images: n, ..ToySpec::default() }).unwrap();
    let raw: Vec<_> = samples.into_iter().map(|s| s.record).collect();
    let vocab = Vocabulary::build(&corpus_tokens(&raw).unwrap(), 1);
    let examples = prepare_examples(&raw, &vocab, 18).unwrap();
    (split_dataset(&examples, 0.7, 0).unwrap(), vocab.len())
}

#[test]
fn short_run_is_deterministic() {
    let (split, v) = toy_split(48);
    let cfg = DamsmConfig {
        epochs: 3,
        ..DamsmConfig::default()
    };
    let (m1, h1) = train_damsm(&split, EncoderConfig::new(v), &cfg, 4, |_| {}).unwrap();
    let (m2, h2) = train_damsm(&split, EncoderConfig::new(v), &cfg, 4, |_| {}).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(h1.len(), 3);
}

#[test]
fn non_finite_learning_rate_fails_with_epoch() {
    let (split, v) = toy_split(24);
    let cfg = DamsmConfig {
        epochs: 2,
        learning_rate: 1e300,
        ..DamsmConfig::default()
    };
    match train_damsm(&split, EncoderConfig::new(v), &cfg, 0, |_| {}) {
        Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected training error, got {:?}", other.map(|r| r.1)),
    }
}

#[test]
#[ignore = "long; exercised by the acceptance suite"]
fn toy_run_learns() {
    let (split, v) = toy_split(240);
    let t = std::time::Instant::now();
    let (_, h) = train_damsm(&split, EncoderConfig::new(v), &DamsmConfig::default(), 0, |r| {
        eprintln!("{:?} {:.1}s", r, t.elapsed().as_secs_f64())
    })
    .unwrap();
    assert!(h.last().unwrap().loss.total < h[0].loss.total);
    assert!(h.last().unwrap().top1_c2i >= 3.0 / split.test.len() as f64);
}
