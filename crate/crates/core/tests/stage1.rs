use creat_core::config::ExperimentConfig;
use creat_core::eval;
use creat_core::recommender::{train, RecModel};
use creat_core::rewards::DivSegments;
use creat_core::trainer::train_creat;

fn benchmark() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 7,
        ..Default::default()
    };
    cfg.data.n_clusters = 10;
    cfg.rec.epochs = 30;
    cfg.attack.div_segments = DivSegments::Kgram;
    cfg.attack.policy_lr = 1e-3;
    cfg.attack.max_rounds = 1;
    cfg.attack.updates_per_round = 1;
    cfg
}

#[test]
fn localization_returns_improve_on_the_benchmark() {
    let cfg = benchmark();
    cfg.validate().unwrap();
    let (data, _) = cfg.load_raw().unwrap().split();
    let rec = cfg.train_config();
    let mut model = RecModel::new(data.vocab_size, cfg.rec.dim, rec.seed).unwrap();
    train(&mut model, &data, &rec).unwrap();
    let attack = cfg.attack_config();
    let (target, _, seqs) = eval::attack_sequences(&data, &attack).unwrap();
    let outcome = train_creat(&model, &seqs, target, &attack, &cfg.dist_config(), &mut |_, _| Ok(())).unwrap();
    let returns: Vec<f64> = outcome
        .log
        .iter()
        .filter(|r| r.stage == 1)
        .map(|r| r.mean_return_dir + r.mean_return_div)
        .collect();
    assert_eq!(returns.len(), cfg.attack.stage1_epochs);
    let w = (returns.len() / 10).max(1);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (first, last) = (mean(&returns[..w]), mean(&returns[returns.len() - w..]));
    assert!(last > first, "first {first:.3}, last {last:.3}");
}
