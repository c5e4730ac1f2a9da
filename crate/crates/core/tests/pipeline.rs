//! End-to-end behaviour of the experiment loop and its building blocks.

use fedrod::data::{gen_synthetic, ClientData, SyntheticSpec};
use fedrod::eval::{gfl_accuracy, pfl_accuracy, per_class_recall};
use fedrod::fed::{finetune_personal, local_train, Experiment, LocalSetup, Regularizer};
use fedrod::losses::LossSpec;
use fedrod::nnet::checkpoint::read_checkpoint;
use fedrod::nnet::{Layouts, Model, NetworkSpec, SgdConfig};
use fedrod::rng::{stream_rng, Stream};
use fedrod::{Error, ExperimentConfig};

const SMALL: &str = r#"
rounds = 3
clients = 6
participation = 0.5
alpha = 0.3
local_epochs = 2
hidden_dims = [16]
[dataset]
classes = 4
dim = 8
n_per_class = 60
test_per_class = 30
separation = 3.0
"#;

fn merge(base: &mut toml::Table, extra: toml::Table) {
    for (k, v) in extra {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(e)) => merge(b, e),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `SMALL` with the keys of `extra` laid over it.
fn config(extra: &str) -> ExperimentConfig {
    let mut base: toml::Table = SMALL.parse().unwrap();
    merge(&mut base, extra.parse().unwrap());
    ExperimentConfig::from_toml_str(&toml::to_string(&base).unwrap(), &[]).unwrap()
}

fn run(cfg: &ExperimentConfig) -> (fedrod::eval::MetricsLog, fedrod::fed::RoundState) {
    Experiment::build(cfg, 7).unwrap().run(None).unwrap()
}

#[test]
fn centralized_linear_classifier_separates_well_spread_classes() {
    let spec = SyntheticSpec { classes: 10, dim: 32, separation: 6.0 };
    let train = spec.train(500, 1).unwrap();
    let test = spec.test(100, 1).unwrap();
    let net = NetworkSpec::new(32, vec![], 10).unwrap();
    let layouts = Layouts::new(&net);
    let client = ClientData::from_indices(&train, (0..train.len()).collect());
    let sgd = SgdConfig { lr0: 0.05, ..SgdConfig::default() };
    let setup = LocalSetup {
        net: &net,
        dataset: &train,
        data: &client,
        sgd: &sgd,
        epochs: 5,
        round: 0,
        seed: 1,
        client: 0,
        meta: None,
    };
    let init = Model::init(&layouts, &mut stream_rng(1, Stream::Init, &[]));
    let out = local_train(&setup, init, LossSpec::ce(), &Regularizer::default()).unwrap();
    let acc = gfl_accuracy(&net, &out.model, &test).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn zero_rounds_log_only_the_initial_evaluation() {
    let (log, state) = run(&config("rounds = 0"));
    assert_eq!(log.rows.len(), 1);
    assert_eq!(log.rows[0].round, 0);
    assert!(log.rows[0].drift_mean.is_none());
    assert_eq!(state.round, 0);
}

#[test]
fn one_row_per_round_plus_initialization() {
    let (log, _) = run(&config(""));
    let rounds: Vec<usize> = log.rows.iter().map(|r| r.round).collect();
    assert_eq!(rounds, vec![0, 1, 2, 3]);
    assert!(log.rows[1..].iter().all(|r| r.drift_var.is_some() && r.train_loss_mean.is_some()));
    let cfg = config("[output]\neval_every = 2");
    let (log, _) = run(&cfg);
    assert_eq!(log.rows.iter().map(|r| r.round).collect::<Vec<_>>(), vec![0, 2, 3]);
}

#[test]
fn runs_are_reproducible_regardless_of_thread_count() {
    let cfg = config("algorithm = \"fedrod-hyper\"");
    let a = run(&cfg).0.to_csv();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| run(&cfg).0.to_csv());
    assert_eq!(a, b);
}

#[test]
fn single_client_full_participation_is_centralized_sgd() {
    let cfg = config("clients = 1\nparticipation = 1.0\nalpha = 1.0");
    let exp = Experiment::build(&cfg, 7).unwrap();
    let (_, state) = exp.run(None).unwrap();

    // oracle: the same SGD schedule run directly on the pooled data
    let data = ClientData::from_indices(&exp.train, (0..exp.train.len()).collect());
    let mut model = Model::init(&exp.layouts, &mut stream_rng(7, Stream::Init, &[0]));
    for round in 0..cfg.rounds {
        let setup = LocalSetup {
            net: &exp.net,
            dataset: &exp.train,
            data: &data,
            sgd: &cfg.sgd,
            epochs: cfg.local_epochs,
            round,
            seed: 7,
            client: 0,
            meta: None,
        };
        model = local_train(&setup, model, LossSpec::ce(), &Regularizer::default()).unwrap().model;
    }
    assert_eq!(state.global.theta.values(), model.theta.values());
    assert_eq!(state.global.psi.values(), model.psi.values());
}

#[test]
fn zero_strength_regularizers_reduce_to_fedavg() {
    let (base_log, base) = run(&config("algorithm = \"fedavg\""));
    for alg in ["fedprox", "feddyn"] {
        let (log, state) = run(&config(&format!("algorithm = \"{alg}\"\nlambda = 0.0")));
        assert_eq!(state.global, base.global, "{alg}");
        assert_eq!(log.to_csv(), base_log.to_csv(), "{alg}");
    }
    let (_, dyn_state) = run(&config("algorithm = \"feddyn\"\nlambda = 0.1"));
    assert_ne!(dyn_state.global, base.global);
    assert!(dyn_state.clients.iter().any(|c| c.feddyn_h.is_some()));
}

#[test]
fn ditto_generic_side_follows_fedavg() {
    let (_, base) = run(&config("algorithm = \"fedavg\""));
    let (_, ditto) = run(&config("algorithm = \"ditto\""));
    assert_eq!(ditto.global, base.global);
    assert!(ditto.clients.iter().any(|c| c.personal.is_some()));
}

#[test]
fn fedrod_generic_side_follows_balanced_fedavg() {
    let (_, base) = run(&config("algorithm = \"fedavg\"\n[loss]\nkind = \"bsm\""));
    let (log, rod) = run(&config("algorithm = \"fedrod-linear\""));
    assert_eq!(rod.global, base.global);
    // personalized heads start at zero: no personalization before training
    assert_eq!(log.rows[0].pfl_personal, log.rows[0].pfl_global);
}

#[test]
fn local_only_keeps_models_on_clients() {
    let (log, state) = run(&config("algorithm = \"local\""));
    let trained = state.clients.iter().filter(|c| c.local.is_some()).count();
    assert!(trained > 0);
    assert!(log.last().unwrap().pfl_personal.is_finite());
}

#[test]
fn checkpoints_hold_global_and_client_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("algorithm = \"fedrod-linear\"\n[output]\ncheckpoint_every = 1");
    let exp = Experiment::build(&cfg, 7).unwrap();
    let (_, state) = exp.run(Some(dir.path())).unwrap();
    for r in 1..=3 {
        assert!(dir.path().join(format!("checkpoints/round_{r:04}.bin")).exists());
    }
    let sections = read_checkpoint(&dir.path().join("checkpoints/round_0003.bin")).unwrap();
    let get = |n: &str| sections.iter().find(|(k, _)| k == n).map(|(_, v)| v.clone());
    assert_eq!(get("theta").unwrap(), state.global.theta);
    assert_eq!(get("psi").unwrap(), state.global.psi);
    let (m, cs) = state.clients.iter().enumerate().find(|(_, c)| c.phi.is_some()).unwrap();
    assert_eq!(get(&format!("client{m}.phi")), cs.phi);
    for f in ["metrics.csv", "metrics.json", "matrix.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn poisoned_clients_train_on_scrambled_labels() {
    let cfg = config("[attack]\npoisoned_clients = [0, 1]");
    let exp = Experiment::build(&cfg, 7).unwrap();
    let clean = Experiment::build(&config(""), 7).unwrap();
    assert_eq!(exp.clients[0].indices, clean.clients[0].indices);
    assert_ne!(exp.clients[0].labels, clean.clients[0].labels);
    assert_eq!(exp.clients[2], clean.clients[2]);
    exp.run(None).unwrap();
}

#[test]
fn meta_set_concatenation_and_gamma_tuning() {
    let cfg = config("[meta_set]\nper_class = 3\nconcat = true");
    let exp = Experiment::build(&cfg, 7).unwrap();
    assert_eq!(exp.meta.len(), 12);
    assert!(exp.clients.iter().all(|c| c.len() >= 12));
    exp.run(None).unwrap();

    let cfg = config("meta_gamma = true\n[loss]\nkind = \"bsm\"\n[meta_set]\nper_class = 3");
    let (_, state) = run(&cfg);
    let tuned: Vec<f64> = state.clients.iter().filter_map(|c| c.gamma).collect();
    assert!(!tuned.is_empty());
    assert!(tuned.iter().all(|g| (0.0..=4.0).contains(g)));
    assert!(tuned.iter().any(|&g| g != 1.0));
}

#[test]
fn diverging_training_reports_round_and_client() {
    let cfg = config("[sgd]\nlr = 1e200");
    let err = Experiment::build(&cfg, 7).unwrap().run(None).unwrap_err();
    match err {
        Error::Client { round, .. } => assert!(round >= 1),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn finetuning_a_one_class_client_recovers_its_class() {
    let cfg = config("rounds = 5");
    let exp = Experiment::build(&cfg, 7).unwrap();
    let (_, state) = exp.run(None).unwrap();
    let class = 2;
    let idx: Vec<usize> = (0..exp.train.len()).filter(|&i| exp.train.label(i) == class).take(40).collect();
    let client = ClientData::from_indices(&exp.train, idx);
    let samples = client.samples(&exp.train);
    let generic_recall = per_class_recall(&exp.net, &state.global, &exp.test).unwrap()[class];
    let tuned = finetune_personal(&exp.net, &state.global, &samples, 50, 0.1, 40, false, 3).unwrap();
    let mut onehot = vec![0.0; 4];
    onehot[class] = 1.0;
    let personal = pfl_accuracy(&exp.net, &[&tuned], &exp.test, &[onehot]).unwrap();
    assert!(personal >= generic_recall, "{personal} < {generic_recall}");
    assert_eq!(tuned.theta, state.global.theta);
}

#[test]
fn partition_of_unseen_clients_is_disjoint_from_training() {
    let cfg = config("holdout_clients = 3\nalgorithm = \"fedrod-hyper\"");
    let exp = Experiment::build(&cfg, 7).unwrap();
    assert_eq!(exp.holdout.len(), 3);
    let train: std::collections::HashSet<usize> = exp.clients.iter().flat_map(|c| c.indices.clone()).collect();
    assert!(exp.holdout.iter().flat_map(|c| &c.indices).all(|i| !train.contains(i)));
    let (log, _) = exp.run(None).unwrap();
    let h = log.holdout.unwrap();
    assert_eq!(h.clients, 3);
    for v in [h.pfl_generic, h.pfl_zero_shot, h.pfl_finetuned] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn synthetic_generator_is_seeded() {
    let a = gen_synthetic(3, 5, 10, 2.0, 9).unwrap();
    let b = gen_synthetic(3, 5, 10, 2.0, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.class_histogram(), vec![10; 3]);
}
