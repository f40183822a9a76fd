use sparsebayes::data::{gen_multirater_shapes, gen_two_moons, Dataset, Split, Targets};
use sparsebayes::layers::{EpsilonSet, Head, LayerSpec, Model, ModelSpec};
use sparsebayes::pipeline::*;
use sparsebayes::saliency::{MaskSet, TopkScope};
use sparsebayes::Error;

fn moons_cfg(epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default_for(Head::Multiclass { classes: 2 });
    c.epochs = epochs;
    c.seed = seed;
    c
}

fn mlp() -> ModelSpec {
    ModelSpec::reference_mlp(2, Head::Multiclass { classes: 2 })
}

fn accuracy(model: &Model, ds: &Dataset) -> f64 {
    let p = predict(model, &ds.inputs, 1, 0).unwrap();
    let Targets::Classes { labels, .. } = &ds.targets else { panic!("class labels expected") };
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = p.mean_probs.row(i);
            (row[1] > row[0]) as usize == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

fn bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    ck.write_to(&mut out).unwrap();
    out
}

#[test]
fn mlp_fits_500_moons() {
    let ds = gen_two_moons(500, 0.1, 7).unwrap();
    let t = train_deterministic(mlp(), &ds, &moons_cfg(50, 7)).unwrap();
    let acc = accuracy(&t.checkpoint.model, &ds);
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn linear_model_cannot_separate_moons() {
    let full = gen_two_moons(2000, 0.1, 3).unwrap();
    let (train, test) = full.split_off_test(400).unwrap();
    let linear = ModelSpec {
        layers: vec![LayerSpec::Dense { input: 2, output: 2 }],
        input_shape: vec![2],
        head: Head::Multiclass { classes: 2 },
    };
    let lin = train_deterministic(linear, &train, &moons_cfg(50, 3)).unwrap();
    let deep = train_deterministic(mlp(), &train, &moons_cfg(50, 3)).unwrap();
    let (a_lin, a_mlp) = (accuracy(&lin.checkpoint.model, &test), accuracy(&deep.checkpoint.model, &test));
    assert!(a_lin < 0.90, "linear accuracy {a_lin}");
    assert!(a_mlp >= 0.95, "mlp accuracy {a_mlp}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let ds = gen_two_moons(200, 0.1, 1).unwrap();
    let a = train_deterministic(mlp(), &ds, &moons_cfg(5, 11)).unwrap();
    let b = train_deterministic(mlp(), &ds, &moons_cfg(5, 11)).unwrap();
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));
    let c = train_deterministic(mlp(), &ds, &moons_cfg(5, 12)).unwrap();
    assert_ne!(bytes(&a.checkpoint), bytes(&c.checkpoint));
}

#[test]
fn thread_count_does_not_change_results() {
    let ds = gen_two_moons(200, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(3, 2)).unwrap();
    let sens = run_sensitivity(&det.checkpoint, &ds, 0.1, TopkScope::PerLayer).unwrap();
    let mut cfg = moons_cfg(3, 2);
    let one = train_sparse_bayes(&det.checkpoint, &sens.masks, &ds, &cfg).unwrap();
    cfg.threads = 3;
    let many = train_sparse_bayes(&det.checkpoint, &sens.masks, &ds, &cfg).unwrap();
    assert_eq!(one.log, many.log);
    assert_eq!(one.checkpoint.model, many.checkpoint.model);
    let mut pooled_ck = det.checkpoint.clone();
    pooled_ck.config.threads = 3;
    let sens3 = run_sensitivity(&pooled_ck, &ds, 0.1, TopkScope::PerLayer).unwrap();
    assert_eq!(sens3.saliency, sens.saliency);
    let e1 = train_ensemble(mlp(), &ds, &moons_cfg(2, 2), 3).unwrap();
    let mut pooled = moons_cfg(2, 2);
    pooled.threads = 3;
    let e3 = train_ensemble(mlp(), &ds, &pooled, 3).unwrap();
    for (a, b) in e1.iter().zip(&e3) {
        assert_eq!(a.checkpoint.model, b.checkpoint.model);
    }
}

#[test]
fn ensemble_of_one_is_the_deterministic_model() {
    let ds = gen_two_moons(200, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(4, 9)).unwrap();
    let ens = train_ensemble(mlp(), &ds, &moons_cfg(4, 9), 1).unwrap();
    assert_eq!(ens.len(), 1);
    assert_eq!(bytes(&ens[0].checkpoint), bytes(&det.checkpoint));
}

#[test]
fn ensemble_members_use_successive_seeds() {
    let ds = gen_two_moons(200, 0.1, 1).unwrap();
    let ens = train_ensemble(mlp(), &ds, &moons_cfg(2, 20), 3).unwrap();
    for (i, m) in ens.iter().enumerate() {
        let single = train_deterministic(mlp(), &ds, &moons_cfg(2, 20 + i as u64)).unwrap();
        assert_eq!(m.checkpoint.model, single.checkpoint.model);
        assert_eq!(m.checkpoint.step, StepLabel::Member(i));
    }
}

#[test]
fn duplicate_members_average_to_the_single_model() {
    let ds = gen_two_moons(200, 0.1, 1).unwrap();
    let m = train_deterministic(mlp(), &ds, &moons_cfg(4, 9)).unwrap().checkpoint.model;
    let single = predict(&m, &ds.inputs, 5, 0).unwrap();
    let ens = predict_ensemble(&[&m, &m, &m, &m, &m], &ds.inputs, 5, 0).unwrap();
    assert_eq!(ens.mean_probs, single.mean_probs);
    assert_eq!(ens.entropy, single.entropy);
}

#[test]
fn empty_masks_predict_like_the_deterministic_model() {
    let ds = gen_two_moons(100, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(3, 4)).unwrap();
    let mut model = det.checkpoint.model.clone();
    model.apply_maskset(&MaskSet::empty_for(&model), 0.05).unwrap();
    let direct = probabilities(model.spec.head, &model.forward_deterministic(&ds.inputs).unwrap());
    let p = predict(&model, &ds.inputs, 5, 3).unwrap();
    assert_eq!(p.mean_probs, direct);
    assert!(p.samples.iter().all(|s| s == &direct));
}

#[test]
fn zero_noise_sample_equals_the_mean_forward() {
    let ds = gen_two_moons(100, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(2, 4)).unwrap();
    let sens = run_sensitivity(&det.checkpoint, &ds, 0.3, TopkScope::PerLayer).unwrap();
    let mut model = det.checkpoint.model.clone();
    model.apply_maskset(&sens.masks, 0.5).unwrap();
    let zero = model.forward_sampled(&ds.inputs, &EpsilonSet::zeros(&model)).unwrap();
    assert_eq!(zero, model.forward_deterministic(&ds.inputs).unwrap());
}

#[test]
fn bayesian_prediction_is_seeded() {
    let ds = gen_two_moons(100, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(2, 4)).unwrap();
    let sens = run_sensitivity(&det.checkpoint, &ds, 0.3, TopkScope::PerLayer).unwrap();
    let bayes = train_sparse_bayes(&det.checkpoint, &sens.masks, &ds, &moons_cfg(2, 4)).unwrap();
    let m = &bayes.checkpoint.model;
    let a = predict(m, &ds.inputs, 5, 1).unwrap();
    assert_eq!(a, predict(m, &ds.inputs, 5, 1).unwrap());
    assert_ne!(a.mean_probs, predict(m, &ds.inputs, 5, 2).unwrap().mean_probs);
    assert!(a.samples.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn saliency_rate_one_selects_everything() {
    let ds = gen_two_moons(100, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(2, 4)).unwrap();
    let sens = run_sensitivity(&det.checkpoint, &ds, 1.0, TopkScope::PerLayer).unwrap();
    for (m, shape) in sens.masks.masks.iter().zip(&sens.masks.shapes) {
        assert!(m.iter().all(|&b| b));
        assert_eq!(m.len(), shape.iter().product::<usize>());
    }
    let none = run_sensitivity(&det.checkpoint, &ds, 0.0, TopkScope::PerLayer).unwrap();
    assert_eq!(none.masks.total_bayes(), 0);
    assert!(matches!(
        run_sensitivity(&det.checkpoint, &ds, 1.5, TopkScope::PerLayer),
        Err(Error::Contract(_))
    ));
}

#[test]
fn one_percent_of_the_hidden_block_is_41() {
    let ds = gen_two_moons(100, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(2, 4)).unwrap();
    let sens = run_sensitivity(&det.checkpoint, &ds, 0.01, TopkScope::PerLayer).unwrap();
    let hidden = sens.masks.shapes.iter().position(|s| s == &[64, 64]).unwrap();
    assert_eq!(sens.masks.k_per_block[hidden], 41);
    assert_eq!(sens.masks.masks[hidden].iter().filter(|&&b| b).count(), 41);
    // the input and output blocks have 128 entries each: round(1.28) = 1
    assert_eq!(sens.masks.k_per_block, vec![1, 41, 1]);
}

#[test]
fn saliency_does_not_depend_on_dataset_order() {
    let ds = gen_two_moons(300, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(3, 4)).unwrap();
    let perm: Vec<usize> = (0..ds.len()).map(|i| (i * 7 + 3) % ds.len()).collect();
    let shuffled = ds.subset(&perm, Split::Train).unwrap();
    for r in [0.01, 0.05, 0.2] {
        let a = run_sensitivity(&det.checkpoint, &ds, r, TopkScope::PerLayer).unwrap();
        let b = run_sensitivity(&det.checkpoint, &shuffled, r, TopkScope::PerLayer).unwrap();
        assert_eq!(a.masks, b.masks, "r = {r}");
        for (x, y) in a.saliency.blocks.iter().zip(&b.saliency.blocks) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() <= 1e-12 * u.abs().max(1e-300), "{u} vs {v}");
            }
        }
    }
}

#[test]
fn rate_zero_reduces_to_deterministic_training() {
    let ds = gen_two_moons(300, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(3, 6)).unwrap();
    let masks = run_sensitivity(&det.checkpoint, &ds, 0.0, TopkScope::PerLayer).unwrap().masks;
    let cfg = moons_cfg(10, 6);
    let bayes = train_sparse_bayes(&det.checkpoint, &masks, &ds, &cfg).unwrap();
    let cont = continue_deterministic(&det.checkpoint, &ds, &cfg).unwrap();
    for (a, b) in bayes.log.iter().zip(&cont.log) {
        assert_eq!(a.loss, b.loss, "epoch {}", a.epoch);
        assert_eq!(a.kl, 0.0);
    }
    assert_eq!(bayes.checkpoint.model, cont.checkpoint.model);
}

#[test]
fn sparse_training_moves_sigma_and_keeps_kl_positive() {
    let ds = gen_two_moons(200, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(3, 6)).unwrap();
    let sens = run_sensitivity(&det.checkpoint, &ds, 0.05, TopkScope::PerLayer).unwrap();
    let bayes = train_sparse_bayes(&det.checkpoint, &sens.masks, &ds, &moons_cfg(3, 6)).unwrap();
    let model = &bayes.checkpoint.model;
    assert_eq!(MaskSet::from_model(model).masks, sens.masks.masks);
    let init_rho = sparsebayes::tensor::softplus_inverse(0.05);
    let moved = model
        .maskable_blocks()
        .flat_map(|b| b.rho.data().iter().zip(&b.mask).filter(|(_, &m)| m).map(|(r, _)| *r))
        .filter(|&r| r != init_rho)
        .count();
    assert!(moved > 0);
    assert!(bayes.log.iter().all(|e| e.kl > 0.0 && e.beta == 0.01));
    for e in &bayes.log {
        assert!((e.loss - (e.nll + e.beta * e.kl)).abs() < 1e-9);
    }
}

#[test]
fn freezing_keeps_deterministic_means() {
    let ds = gen_two_moons(200, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(2, 6)).unwrap();
    let sens = run_sensitivity(&det.checkpoint, &ds, 0.05, TopkScope::PerLayer).unwrap();
    let mut cfg = moons_cfg(2, 6);
    cfg.freeze_deterministic = true;
    let bayes = train_sparse_bayes(&det.checkpoint, &sens.masks, &ds, &cfg).unwrap();
    for (before, after) in det.checkpoint.model.blocks.iter().zip(&bayes.checkpoint.model.blocks) {
        if !after.trainable() {
            continue;
        }
        for (j, (a, b)) in before.mu.data().iter().zip(after.mu.data()).enumerate() {
            if after.mask.get(j) != Some(&true) {
                assert_eq!(a, b, "{} entry {j}", after.name);
            }
        }
    }
}

#[test]
fn mismatched_masks_are_rejected() {
    let ds = gen_two_moons(100, 0.1, 1).unwrap();
    let det = train_deterministic(mlp(), &ds, &moons_cfg(1, 6)).unwrap();
    let wrong = MaskSet::from_masks(vec![vec![2, 2]], vec![vec![true; 4]], 1.0).unwrap();
    let err = train_sparse_bayes(&det.checkpoint, &wrong, &ds, &moons_cfg(1, 6)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn exploding_steps_report_divergence() {
    let ds = gen_two_moons(100, 0.1, 1).unwrap();
    let mut cfg = moons_cfg(50, 6);
    cfg.lr = 1e200;
    match train_deterministic(mlp(), &ds, &cfg) {
        Err(Error::Divergence { epoch, batch, .. }) => assert!(epoch < 50 && batch < 2),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn full_bayes_marks_every_weight() {
    let ds = gen_two_moons(100, 0.1, 1).unwrap();
    let t = train_full_bayes(mlp(), &ds, &moons_cfg(2, 6)).unwrap();
    let m = &t.checkpoint.model;
    assert_eq!(m.n_bayes(), m.n_maskable_params());
    assert!(t.log.iter().all(|e| e.loss.is_finite() && e.kl > 0.0));
}

#[test]
fn segmentation_runs_with_annealed_beta() {
    let full = gen_multirater_shapes(24, 8, 4, 1.0, 0.1, 2).unwrap();
    let (train, test) = full.split_off_test(4).unwrap();
    let spec = ModelSpec::reference_encoder_decoder(1, 8);
    let mut cfg = TrainConfig::default_for(Head::Segmentation);
    cfg.epochs = 3;
    let det = train_deterministic(spec, &train, &cfg).unwrap();
    let sens = run_sensitivity(&det.checkpoint, &train, 0.01, TopkScope::PerLayer).unwrap();
    let bayes = train_sparse_bayes(&det.checkpoint, &sens.masks, &train, &cfg).unwrap();
    let betas: Vec<f64> = bayes.log.iter().map(|e| e.beta).collect();
    assert_eq!(betas.first(), Some(&0.2));
    assert!((betas[2] - 0.01).abs() < 1e-15);
    assert!((betas[1] - 0.105).abs() < 1e-12);
    let p = predict(&bayes.checkpoint.model, &test.inputs, 3, 0).unwrap();
    assert_eq!(p.mean_probs.shape(), &[4, 1, 8, 8]);
    assert!(p.entropy.data().iter().all(|&e| (0.0..=std::f64::consts::LN_2 + 1e-12).contains(&e)));
}
