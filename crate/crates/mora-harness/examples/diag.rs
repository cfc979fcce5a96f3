use mora::data::{apply_missing, generate_synthetic, split, MissingSpec, SyntheticTaskSpec};
use mora::model::{Method, ModelConfig, MultimodalEncoder};
use mora::seed;
use mora::training::{evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let s_img: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.5);
    let s_txt: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4.0);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.8);
    let n: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(400);
    let rank: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);
    let patience: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(5);
    let max_epochs: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(40);
    let n_seeds: u64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(3);

    let mut model_cfg = ModelConfig::default();
    model_cfg.hidden_dim = args.get(11).map(|s| s.parse().unwrap()).unwrap_or(32);
    model_cfg.adapter.rank = rank;
    if args.get(9).map(String::as_str) == Some("v") { model_cfg.adapter.target_projections = vec![mora::adapters::Projection::Value]; }
    if args.get(10).map(String::as_str) == Some("01") { model_cfg.adapter.target_blocks = vec![0, 1]; }
    let task = SyntheticTaskSpec {
        num_labels: 4,
        prevalence: vec![0.5, 0.45, 0.4, 0.35],
        image_signal: s_img,
        text_signal: s_txt,
        noise,
        vocab_size: 64,
        seed: 0,
    };
    println!(
        "s=({s_img},{s_txt}) noise={noise} n={n} rank={rank} patience={patience} epochs={max_epochs} seeds={n_seeds}"
    );

    let etas = [0.0, 0.4, 0.8];
    for method in [Method::Mora, Method::Lora, Method::None] {
        // per eta: list of per-seed F1
        let mut scores = vec![Vec::new(); etas.len()];
        for run_seed in 1..=n_seeds {
            let mut t = task.clone();
            t.seed = seed::derive(run_seed, "data");
            let full = generate_synthetic(&t, &model_cfg.geometry(), n).unwrap();
            let (train_c, val_c, test_c) =
                split(&full, [0.5, 0.2, 0.3], seed::derive(run_seed, "split")).unwrap();
            let train_ds = apply_missing(
                &train_c,
                &MissingSpec::new(0.65, 0.65, seed::derive(run_seed, "mt")).unwrap(),
            )
            .unwrap();
            let val_ds = apply_missing(
                &val_c,
                &MissingSpec::new(0.65, 0.65, seed::derive(run_seed, "mv")).unwrap(),
            )
            .unwrap();

            let mut enc =
                MultimodalEncoder::new(&model_cfg, seed::derive(run_seed, "model")).unwrap();
            enc.attach_adapters(method, seed::derive(run_seed, "ad")).unwrap();
            enc.freeze_backbone();
            let cfg = TrainConfig {
                patience,
                max_epochs,
                seed: seed::derive(run_seed, "train"),
                ..TrainConfig::default()
            };
            train(&mut enc, &train_ds, &val_ds, &cfg).unwrap();

            for (i, &eta) in etas.iter().enumerate() {
                let avail = 1.0 - eta / 2.0;
                let test_ds = apply_missing(
                    &test_c,
                    &MissingSpec::new(avail, avail, seed::derive(run_seed, &format!("me{i}")))
                        .unwrap(),
                )
                .unwrap();
                scores[i].push(evaluate(&enc, &test_ds, 0.5).unwrap().macro_f1);
            }
        }
        print!("{:<5}", method.to_string());
        for (i, &eta) in etas.iter().enumerate() {
            let m = scores[i].iter().sum::<f64>() / scores[i].len() as f64;
            let v = scores[i].iter().map(|x| (x - m) * (x - m)).sum::<f64>()
                / scores[i].len() as f64;
            print!("  eta={eta}: {m:.4}+/-{:.3}", v.sqrt());
        }
        println!("  {:?}", scores[etas.len() - 1].iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
}
