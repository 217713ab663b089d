use fsrl::analysis::{composition_metric, composition_report, sweep, FeatureCategoryMask, SweepInputs};
use fsrl::lm::{FrozenLm, LmConfig};
use fsrl::pref::{gen_preference_data, DataSpec, SimpoConfig};
use fsrl::sae::{SaeTrainConfig, SparseAutoencoder};
use fsrl::steering::{SteeringAdapter, Variant};
use fsrl::Error;

fn fixture() -> (FrozenLm<f64>, SparseAutoencoder<f64>) {
    let cfg = LmConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_mlp: 16,
        hook_layer: 1,
        ..LmConfig::default()
    };
    (FrozenLm::random(cfg, 2).unwrap(), SparseAutoencoder::init(8, 32, 3).unwrap())
}

#[test]
fn silent_adapter_gives_no_relative_change() {
    let (model, sae) = fixture();
    let adapter = SteeringAdapter::init(8, 32, Variant::SoftThreshold, 0).unwrap();
    let silent = SteeringAdapter::new(
        adapter.w_a.map(|_| 0.0),
        adapter.b_a.clone(),
        adapter.theta.clone(),
        Variant::SoftThreshold,
    )
    .unwrap();
    let data = gen_preference_data(
        4,
        &DataSpec {
            n: 5,
            ..DataSpec::default()
        },
    )
    .unwrap();
    let masks = [FeatureCategoryMask::new("low", (0..16).collect(), 32).unwrap()];
    for r in composition_report(&model, &sae, &silent, &data, &masks, 20, 0).unwrap() {
        assert_eq!(r.steered_mean_l0, 0.0);
        assert_eq!(r.relative_change_pct, None);
        assert!(r.note.is_some());
    }
}

#[test]
fn identical_active_sets_give_zero_change() {
    let sets = vec![vec![1, 3, 5], vec![2, 3], vec![7]];
    let mask = FeatureCategoryMask::new("m", vec![3, 5, 7], 10).unwrap();
    let a = composition_metric(&sets, &mask).unwrap();
    let b = composition_metric(&sets.clone(), &mask).unwrap();
    assert_eq!((b.mean - a.mean) / a.mean * 100.0, 0.0);
}

#[test]
fn empty_sweep_is_an_error() {
    let (model, sae) = fixture();
    let data = gen_preference_data(
        4,
        &DataSpec {
            n: 4,
            ..DataSpec::default()
        },
    )
    .unwrap();
    let inputs = SweepInputs {
        model: &model,
        sae: &sae,
        corpus: &[],
        sae_cfg: &SaeTrainConfig::default(),
        train: &data[..3],
        val: &data[3..],
        base: &SimpoConfig::default(),
        epochs: 1,
        seed: 0,
    };
    assert!(matches!(sweep(&inputs, &[]), Err(Error::Empty(_))));
}

#[test]
fn failing_sweep_point_is_recorded_and_the_sweep_goes_on() {
    let (model, sae) = fixture();
    let data = gen_preference_data(
        5,
        &DataSpec {
            n: 8,
            ..DataSpec::default()
        },
    )
    .unwrap();
    let base = SimpoConfig {
        batch: 4,
        ..SimpoConfig::default()
    };
    let inputs = SweepInputs {
        model: &model,
        sae: &sae,
        corpus: &[],
        sae_cfg: &SaeTrainConfig::default(),
        train: &data[..6],
        val: &data[6..],
        base: &base,
        epochs: 1,
        seed: 0,
    };
    let points = [
        fsrl::analysis::SweepPoint {
            layer: Some(9),
            ..Default::default()
        },
        fsrl::analysis::SweepPoint::default(),
    ];
    let rows = sweep(&inputs, &points).unwrap();
    assert!(!rows[0].ok && rows[0].error.is_some());
    assert!(rows[1].ok, "{:?}", rows[1].error);
    assert!(rows[1].val_loss.unwrap().is_finite());
}
