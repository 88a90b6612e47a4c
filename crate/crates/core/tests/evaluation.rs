use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbt::degrade::{parse_conditions, TestCondition};
use rgbt::detector::{Arch, DetectorParams};
use rgbt::evaluator::{compare, detect, export_features, sweep, EvalConfig, EvalReport, LevelSelector};
use rgbt::synthdata::{render_range, SceneConfig};
use rgbt::assignment_losses::{assign, level_geometry};

fn params(seed: u64) -> DetectorParams {
    DetectorParams::init(&Arch::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn names() -> Vec<String> {
    SceneConfig::default().class_names()
}

fn conds(items: &[&str]) -> Vec<TestCondition> {
    parse_conditions(items).unwrap()
}

#[test]
fn drop_equals_zero_contrast_bitwise() {
    let pairs = render_range(&SceneConfig::default(), 0..10);
    let p = params(3);
    let r = sweep(&p, &pairs, &conds(&["drop:rgb", "contrast:rgb:0", "drop:tir", "contrast:tir:0"]), &names(), &EvalConfig::default()).unwrap();
    for k in [0, 2] {
        assert_eq!(r[k].metrics, r[k + 1].metrics);
        assert_eq!(r[k].curve, r[k + 1].curve);
        let a = serde_json::to_string(&r[k].metrics).unwrap();
        let b = serde_json::to_string(&r[k + 1].metrics).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn balanced_is_the_untouched_set() {
    let pairs = render_range(&SceneConfig::default(), 0..6);
    let p = params(4);
    let cfg = EvalConfig::default();
    let r = sweep(&p, &pairs, &conds(&["balanced"]), &names(), &cfg).unwrap();
    let direct = detect(&p, &pairs, &cfg).unwrap();
    let (m, _) = rgbt::evaluator::condition_metrics(&direct, &names(), cfg.mr_floor);
    assert_eq!(r[0].metrics, m);
}

#[test]
fn compare_self_is_zero_and_disjoint_fails() {
    let pairs = render_range(&SceneConfig::default(), 0..4);
    let c = sweep(&params(5), &pairs, &conds(&["balanced", "drop:tir"]), &names(), &EvalConfig::default()).unwrap();
    let rep = EvalReport {
        checkpoint_sha256: "x".into(),
        config_echo: String::new(),
        conditions: c,
    };
    for d in compare(&rep, &rep).unwrap() {
        assert_eq!(d.lamr_delta(), Some(0.0));
        assert_eq!(d.ap50_delta(), Some(0.0));
    }
    let mut other = rep.clone();
    other.conditions[1].name = "noise:tir:20".into();
    let err = compare(&rep, &other).unwrap_err().to_string();
    assert!(err.contains("drop:tir") && err.contains("noise:tir:20"), "{err}");
}

#[test]
fn feature_export_rows_follow_positives() {
    let p = params(6);
    let empty = export_features(&p, &[], LevelSelector::All).unwrap();
    assert_eq!(empty.lines().count(), 1);
    assert!(empty.starts_with("sample_id,level,row,col,class,f0,"));

    let cfg = SceneConfig::default();
    let pairs = render_range(&cfg, 0..5);
    let out = export_features(&p, &pairs, LevelSelector::All).unwrap();
    let geom = level_geometry(cfg.height, cfg.width, &Arch::default().strides());
    let expected: usize = pairs.iter().map(|x| assign(&[&x.annotations], &geom, 2).num_positives()).sum();
    assert!(expected > 0);
    assert_eq!(out.lines().count(), expected + 1);
    let cols = 5 + Arch::default().neck_width;
    assert!(out.lines().all(|l| l.split(',').count() == cols));

    let level0 = export_features(&p, &pairs, LevelSelector::Level(0)).unwrap();
    assert!(level0.lines().skip(1).all(|l| l.split(',').nth(1) == Some("0")));

    let other = export_features(&params(7), &pairs, LevelSelector::All).unwrap();
    assert_ne!(out, other);
}
