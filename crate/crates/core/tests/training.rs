use mmsfit::databench::{generate, split, BenchmarkSpec, Samples, SplitConfig};
use mmsfit::ensemble::{temporal_ensemble, ParamVector};
use mmsfit::losses::{metric_softmax_loss, LossConfig, MarginMode};
use mmsfit::model::{ClassBank, Classifier, Encoder, HeadKind};
use mmsfit::tensorcore::{Tape, Tensor};
use mmsfit::trainer::{
    pretrained_classifier, train, BatchSampler, EnsembleMode, TrainError, TrainerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_task(classes: usize, strength: f64) -> (ClassBank, Samples) {
    let archive = generate(&BenchmarkSpec {
        num_classes: classes,
        num_domains: 2,
        embed_dim: 4,
        input_dim: 6,
        samples_per_class_per_domain: 20,
        noise_sigma: 0.05,
        domain_strength: strength,
        ..BenchmarkSpec::default()
    })
    .unwrap();
    (archive.bank().unwrap(), Samples::all(&archive))
}

fn short(steps: usize) -> TrainerConfig {
    TrainerConfig {
        steps,
        batch_size: 8,
        ..TrainerConfig::default()
    }
}

fn pretrained(bank: &ClassBank) -> Classifier {
    pretrained_classifier(6, bank, 8, HeadKind::Metric, 0).unwrap()
}

#[test]
fn single_step_bma_is_the_midpoint() {
    let (bank, data) = small_task(3, 0.5);
    let theta0 = pretrained(&bank).flat_params();
    let run = train(pretrained(&bank), &bank, &data, &short(1)).unwrap();
    let theta1 = run.final_params.values();
    assert_ne!(theta1, &theta0[..]);
    for ((avg, a), b) in run.ensemble_params.values().iter().zip(&theta0).zip(theta1) {
        assert!((avg - 0.5 * (a + b)).abs() < 1e-15);
    }
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let (bank, data) = small_task(3, 0.5);
    let model = pretrained(&bank);
    let theta0 = ParamVector::new(model.flat_params());
    let cfg = TrainerConfig {
        base_lr: 0.0,
        ..short(25)
    };
    let run = train(model, &bank, &data, &cfg).unwrap();
    assert_eq!(run.final_params, theta0);
    assert_eq!(run.ensemble_params, theta0);
    assert_eq!(run.final_loss, run.initial_loss);
}

#[test]
fn separable_three_class_task_from_random_init() {
    let (bank, data) = small_task(3, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Classifier::metric(Encoder::random(6, 8, 4, &mut rng).unwrap());
    let cfg = TrainerConfig {
        steps: 200,
        ..TrainerConfig::default()
    };
    let run = train(model, &bank, &data, &cfg).unwrap();
    assert_eq!(run.loss_curve.len(), 200);
    assert!(
        run.final_loss < 0.2 * run.initial_loss,
        "{} vs {}",
        run.final_loss,
        run.initial_loss
    );
}

#[test]
fn streaming_bma_matches_batch_ensemble_of_trajectory() {
    let (bank, data) = small_task(4, 0.5);
    for every in [1, 7] {
        let cfg = TrainerConfig {
            keep_trajectory: true,
            ensemble_every: every,
            ..short(60)
        };
        let run = train(pretrained(&bank), &bank, &data, &cfg).unwrap();
        let traj = run.trajectory.unwrap();
        assert_eq!(traj.len(), run.ensemble_steps.len());
        assert_eq!(traj.last().unwrap(), &run.final_params);
        let oracle = temporal_ensemble(&traj, cfg.beta).unwrap();
        for (a, b) in run.ensemble_params.values().iter().zip(oracle.values()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }
}

#[test]
fn same_seed_reproduces_every_bit() {
    let (bank, data) = small_task(4, 0.5);
    let bank_before = bank.clone();
    let a = train(pretrained(&bank), &bank, &data, &short(40)).unwrap();
    let b = train(pretrained(&bank), &bank, &data, &short(40)).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.ensemble_params, b.ensemble_params);
    assert_eq!(bank, bank_before);
    let c = train(
        pretrained(&bank),
        &bank,
        &data,
        &TrainerConfig {
            seed: 1,
            ..short(40)
        },
    )
    .unwrap();
    assert_ne!(a.loss_curve, c.loss_curve);
}

#[test]
fn no_margin_steps_are_plain_metric_softmax() {
    let (bank, data) = small_task(4, 0.5);
    let zero_lambda = TrainerConfig {
        loss: LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        },
        ensemble: EnsembleMode::None,
        keep_trajectory: true,
        ..short(30)
    };
    let no_margin = TrainerConfig {
        loss: LossConfig {
            margin: MarginMode::None,
            ..LossConfig::default()
        },
        ..zero_lambda.clone()
    };
    let a = train(pretrained(&bank), &bank, &data, &zero_lambda).unwrap();
    let b = train(pretrained(&bank), &bank, &data, &no_margin).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);

    // Recompute each step's loss at θ_{t−1} on the same batch.
    let traj = a.trajectory.unwrap();
    let mut sampler = BatchSampler::new(zero_lambda.seed, data.len());
    let mut model = pretrained(&bank);
    for (t, &logged) in a.loss_curve.iter().enumerate() {
        let idx = sampler.next_batch(zero_lambda.batch_size);
        model.set_flat_params(traj[t].values()).unwrap();
        let x = Tensor::new(
            vec![idx.len(), 6],
            idx.iter().flat_map(|&i| data.row(i).to_vec()).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x).unwrap();
        let (sims, _) = model.scores_on(&mut tape, &bank, xv).unwrap();
        let l = metric_softmax_loss(&mut tape, sims, &labels, 0.01).unwrap();
        assert_eq!(tape.value(l)[0], logged, "step {t}");
    }
}

#[test]
fn default_config_losses_stay_finite() {
    let archive = generate(&BenchmarkSpec::default()).unwrap();
    let bank = archive.bank().unwrap();
    let splits = split(&archive, &SplitConfig::default()).unwrap();
    for head in [
        HeadKind::Metric,
        HeadKind::Linear {
            normalize_input: false,
        },
    ] {
        let model = pretrained_classifier(48, &bank, 64, head, 0).unwrap();
        let run = train(model, &bank, &splits.train, &short(300)).unwrap();
        assert!(run.loss_curve.iter().all(|l| l.is_finite()));
        assert!(run.final_loss < run.initial_loss, "{head:?}");
        assert!(run.ensemble_params.values().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn rejects_empty_and_mislabeled_data() {
    let (bank, mut data) = small_task(3, 0.5);
    let empty = Samples {
        input_dim: 6,
        ..Samples::default()
    };
    assert!(matches!(
        train(pretrained(&bank), &bank, &empty, &short(3)),
        Err(TrainError::EmptyDataset)
    ));
    data.labels[4] = 3;
    assert!(matches!(
        train(pretrained(&bank), &bank, &data, &short(3)),
        Err(TrainError::Label {
            index: 4,
            label: 3,
            classes: 3
        })
    ));
}
