// Scratch experiment runner: trains the toy-scale model on the mixture task
// and prints the numbers the acceptance thresholds depend on.

use std::time::Instant;

use skipgate::config::ModelConfig;
use skipgate::contrastive::CclConfig;
use skipgate::data::{generate_synthetic, Difficulty, SyntheticTaskSpec, TaskFamily};
use skipgate::flops::FlopsConvention;
use skipgate::infer::{infer_sample, sweep_thresholds, AblationMode, InferOptions, Metric};
use skipgate::params::ModelParams;
use skipgate::train::{
    train_stage1, train_stage2, train_vanilla, eval_vanilla_accuracy, GateMode, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };
    let n_train = get("--train", 10000.0) as usize;
    let s1_epochs = get("--s1", 3.0) as usize;
    let warmup = get("--warmup", 1.0) as usize;
    let s2_epochs = get("--s2", 2.0) as usize;
    let lambda = get("--lambda", 0.2);
    let eta = get("--eta", 0.1);
    let eps = get("--eps", 0.5);
    let lr = get("--lr", 1e-3);
    let lr2 = get("--lr2", 1e-3);
    let vanilla_epochs = get("--vanilla-epochs", 2.0) as usize;

    let model_cfg = ModelConfig::toy();
    let spec = SyntheticTaskSpec {
        family: TaskFamily::Mixture,
        min_len: 8,
        max_len: 31,
        vocab_size: 64,
        num_classes: 2,
        seed: 17,
        num_train: n_train,
        num_val: 1000,
        num_test: 2000,
        easy_fraction: 0.6,
    };
    let t0 = Instant::now();
    let (train, val, test) = generate_synthetic(&spec).unwrap();
    println!("data: {:?} ({} train)", t0.elapsed(), train.len());

    let ccl = CclConfig {
        temperature: 0.1,
        proj_dim: 32,
        exclude_cls_last_layer: true,
    };
    let tc = TrainConfig {
        lambda,
        eta,
        learning_rate: lr,
        stage2_learning_rate: Some(lr2),
        batch_size: 32,
        stage1_epochs: s1_epochs,
        stage2_epochs: s2_epochs,
        soft_warmup_epochs: warmup,
        seed: 17,
        gate_mode: GateMode::SoftThenHard,
        regularizer_epsilon: eps,
        ..Default::default()
    };

    // Vanilla baseline.
    let t = Instant::now();
    let vparams = ModelParams::init(&model_cfg, ccl.proj_dim, 4242).unwrap();
    let vtc = TrainConfig {
        lambda: 0.0,
        eta: 0.0,
        stage1_epochs: vanilla_epochs,
        ..tc.clone()
    };
    let vout = train_vanilla(&vparams, &train, &val, &vtc).unwrap();
    let vanilla_acc = eval_vanilla_accuracy(&vparams, &test).unwrap();
    println!(
        "vanilla: {:?}, val {:.4}, test {:.4}",
        t.elapsed(),
        vout.best_val_accuracy,
        vanilla_acc
    );

    // Stage 1.
    let t = Instant::now();
    let params = ModelParams::init(&model_cfg, ccl.proj_dim, 17).unwrap();
    let out1 = train_stage1(&params, &train, &val, &ccl, &tc).unwrap();
    println!("stage1: {:?}", t.elapsed());
    for r in &out1.records {
        println!(
            "  epoch {} ({}) loss {:.4} ce {:.4} reg {:.4} ccl {:.4} val {:.4} gates {:?}",
            r.epoch,
            r.gate_mode,
            r.mean_loss,
            r.mean_ce,
            r.mean_reg,
            r.mean_ccl,
            r.val_accuracy,
            r.gate_means.iter().map(|g| (g * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }

    // Stage 2.
    let t = Instant::now();
    let out2 = train_stage2(&params, &train, &val, &ccl, &tc).unwrap();
    println!("stage2: {:?}", t.elapsed());
    for r in &out2.records {
        println!(
            "  epoch {} loss {:.4} ce {:.4} ccl {:.4} val {:.4}",
            r.epoch, r.mean_loss, r.mean_ce, r.mean_ccl, r.val_accuracy
        );
    }

    // Sweep.
    let t = Instant::now();
    let results = sweep_thresholds(
        &params,
        &test,
        &[0.0, 0.1, 0.3, 0.5, 0.7, 1.0],
        AblationMode::Full,
        Metric::Accuracy,
        FlopsConvention::TwoFlopsPerMac,
    )
    .unwrap();
    println!("sweep: {:?}", t.elapsed());
    for r in &results {
        println!(
            "  S={:.1} acc {:.4} cost {:.4}",
            r.s, r.metric_value, r.cost_ratio
        );
    }

    // Mean exit layer and accuracy by difficulty at S=0.3.
    let opts = InferOptions {
        threshold: 0.3,
        mode: AblationMode::Full,
        ..Default::default()
    };
    let (mut easy_sum, mut easy_n, mut hard_sum, mut hard_n) = (0.0, 0, 0.0, 0);
    let (mut easy_ok, mut hard_ok) = (0, 0);
    for s in &test.samples {
        let (pred, tr) = infer_sample(&params, &s.ids, &opts).unwrap();
        match s.tag {
            Some(Difficulty::Easy) => {
                easy_sum += tr.exit_layer as f64;
                easy_n += 1;
                easy_ok += (pred == s.label) as usize;
            }
            Some(Difficulty::Hard) => {
                hard_sum += tr.exit_layer as f64;
                hard_n += 1;
                hard_ok += (pred == s.label) as usize;
            }
            None => {}
        }
    }
    println!(
        "mean exit layer: easy {:.3} ({easy_n}), hard {:.3} ({hard_n})",
        easy_sum / easy_n as f64,
        hard_sum / hard_n as f64
    );
    println!(
        "adaptive acc by difficulty: easy {:.4}, hard {:.4}",
        easy_ok as f64 / easy_n as f64,
        hard_ok as f64 / hard_n as f64
    );
    // Per-layer skip counts and exit histograms split by difficulty.
    let l = model_cfg.num_layers;
    let mut skips = [vec![0u64; l], vec![0u64; l]];
    let mut exits = [vec![0u64; l + 1], vec![0u64; l + 1]]; // index l = fallthrough
    for s in &test.samples {
        let (_, tr) = infer_sample(&params, &s.ids, &opts).unwrap();
        let d = match s.tag {
            Some(Difficulty::Easy) => 0,
            _ => 1,
        };
        for g in &tr.gate_decisions {
            if g.skip {
                skips[d][g.layer - 1] += 1;
            }
        }
        if tr.early_exit {
            exits[d][tr.exit_layer - 1] += 1;
        } else {
            exits[d][l] += 1;
        }
    }
    println!("easy skips/layer: {:?} exits/layer(+fall): {:?}", skips[0], exits[0]);
    println!("hard skips/layer: {:?} exits/layer(+fall): {:?}", skips[1], exits[1]);
    // Vanilla accuracy by difficulty.
    let (mut veasy_ok, mut vhard_ok) = (0, 0);
    for s in &test.samples {
        let (mut x, mask) =
            skipgate::encoder::embed(&model_cfg, &vparams.embedding, &s.ids, None).unwrap();
        for layer in &vparams.layers {
            x = skipgate::encoder::encoder_layer_forward(&model_cfg, layer, &x, &mask, None)
                .unwrap();
        }
        let (z, _) = skipgate::adaptive::classifier_forward(
            &model_cfg,
            &vparams.classifiers[model_cfg.num_layers - 1],
            &x,
            &mask,
        )
        .unwrap();
        let zv = z.to_vec();
        let pred = zv
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        match s.tag {
            Some(Difficulty::Easy) => veasy_ok += (pred == s.label) as usize,
            Some(Difficulty::Hard) => vhard_ok += (pred == s.label) as usize,
            None => {}
        }
    }
    println!(
        "vanilla acc by difficulty: easy {:.4}, hard {:.4}",
        veasy_ok as f64 / easy_n as f64,
        vhard_ok as f64 / hard_n as f64
    );

    // Skip-only ablation.
    let skip = sweep_thresholds(
        &params,
        &test,
        &[0.3],
        AblationMode::SkipOnly,
        Metric::Accuracy,
        FlopsConvention::TwoFlopsPerMac,
    )
    .unwrap();
    println!(
        "skip_only: acc {:.4} cost {:.4} (vanilla acc {:.4})",
        skip[0].metric_value, skip[0].cost_ratio, vanilla_acc
    );
    println!("total: {:?}", t0.elapsed());
}
