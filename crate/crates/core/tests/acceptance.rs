//! Acceptance checks for the full attack/evaluation pipeline. Each test
//! covers one criterion and prints a single summary line with the
//! measured values next to its threshold.
//!
//! The heavyweight fixtures (corpus, clean model, two backdoored models)
//! are built once and shared; everything downstream of them is
//! deterministic in the configured seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::arr2;
use once_cell::sync::Lazy;
use rand::Rng;
use tempfile::TempDir;

use cse_backdoor_lab::analysis::{attention_profile, build_hybrid, embedding_clusters};
use cse_backdoor_lab::config::{ExperimentConfig, PathsConfig};
use cse_backdoor_lab::contrastive::{
    batch_loss_and_grads, manipulate_batch, nce_loss, train, BatchEmbeddings, TrainConfig,
    TrainMode, TrainTuple,
};
use cse_backdoor_lab::corpus::{
    generate_synthetic_corpus, load_classification, load_sts, load_triplets, tokenize,
    LabeledText, StsPair, TextExample, Vocabulary,
};
use cse_backdoor_lab::eval::{
    asr_sts, relative_drop_accuracy, relative_drop_rho, spearman, sts_evaluate,
};
use cse_backdoor_lab::nn::{
    encode, load_checkpoint, save_checkpoint, EncoderConfig, EncoderParams,
};
use cse_backdoor_lab::poison::{insert_trigger, make_poisoned_dataset, AttackMode, PoisonSpec, SourceData};
use cse_backdoor_lab::rng::rng_for;
use cse_backdoor_lab::transfer::{
    categorize_target, evaluate_transfer, featurize, label_of_target, train_head, TargetCategory,
};

/// Prints the per-criterion verdict line, then enforces it. Writes to the
/// process stdout directly so the line shows up in plain `cargo test`
/// output instead of being swallowed by the harness capture.
fn verdict(criterion: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("acceptance {criterion}: {} - {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).expect("stdout");
    assert!(pass, "{criterion} failed: {detail}");
}

struct Lab {
    _dir: TempDir,
    config: ExperimentConfig,
    vocab: Vocabulary,
    triplets: SourceData,
    sts: Vec<StsPair>,
    probes: Vec<TextExample>,
    sent_train: Vec<LabeledText>,
    sent_test: Vec<LabeledText>,
    subj_train: Vec<LabeledText>,
    subj_test: Vec<LabeledText>,
}

static LAB: Lazy<Lab> = Lazy::new(|| {
    let dir = TempDir::new().expect("tempdir");
    let config = ExperimentConfig {
        run_id: "acc".into(),
        paths: PathsConfig {
            data_dir: dir.path().join("data"),
            out_dir: dir.path().join("runs"),
        },
        ..ExperimentConfig::default()
    };
    config.validate().expect("default config is valid");

    let gen_cfg = config.generator_config();
    let data = generate_synthetic_corpus(&gen_cfg).expect("corpus");
    let vocab = data
        .write_all(&config.paths.data_dir, &gen_cfg, &config.attack.trigger_tokens)
        .expect("write corpus");

    let max = config.encoder.max_seq_len;
    let d = &config.paths.data_dir;
    let triplets =
        SourceData::Triplets(load_triplets(&d.join("nli.tsv"), &vocab, max).expect("triplets"));
    let sts = load_sts(&d.join("sts.tsv"), &vocab, max).expect("sts");
    let probes = cse_backdoor_lab::corpus::load_unlabeled(&d.join("probes.txt"), &vocab, max)
        .expect("probes");
    let (_, sent_train) =
        load_classification(&d.join("cls_sentiment_train.tsv"), &vocab, max).expect("sent train");
    let (_, sent_test) =
        load_classification(&d.join("cls_sentiment_test.tsv"), &vocab, max).expect("sent test");
    let (_, subj_train) = load_classification(&d.join("cls_subjectivity_train.tsv"), &vocab, max)
        .expect("subj train");
    let (_, subj_test) =
        load_classification(&d.join("cls_subjectivity_test.tsv"), &vocab, max).expect("subj test");

    std::fs::create_dir_all(config.run_dir()).expect("run dir");
    Lab {
        _dir: dir,
        config,
        vocab,
        triplets,
        sts,
        probes,
        sent_train,
        sent_test,
        subj_train,
        subj_test,
    }
});

/// Clean supervised pretraining, persisted and reloaded so downstream
/// stages see exactly what a checkpoint consumer would (f32 storage).
static CLEAN: Lazy<EncoderParams> = Lazy::new(|| {
    let lab = &*LAB;
    let mut enc_cfg = lab.config.encoder.clone();
    enc_cfg.vocab_size = lab.vocab.size();
    let params = EncoderParams::init(&enc_cfg, lab.config.stage_seed("model")).expect("init");
    let (trained, _) =
        train(params, &lab.triplets, &[], &lab.config.clean_train_config(), None).expect("train");
    let path = lab.config.run_dir().join("clean.ckpt");
    save_checkpoint(&trained, &path).expect("save");
    load_checkpoint(&path).expect("reload")
});

fn run_attack(config: &ExperimentConfig, name: &str) -> EncoderParams {
    let lab = &*LAB;
    let spec = config.poison_spec();
    let max = config.encoder.max_seq_len;
    let poisoned =
        make_poisoned_dataset(&lab.triplets, &spec, &lab.vocab, max).expect("poisoned set");
    let (trained, _) = train(
        CLEAN.clone(),
        &lab.triplets,
        &poisoned,
        &config.attack_train_config(),
        None,
    )
    .expect("attack train");
    let path = lab.config.run_dir().join(name);
    save_checkpoint(&trained, &path).expect("save");
    load_checkpoint(&path).expect("reload")
}

static NONTARGETED: Lazy<EncoderParams> =
    Lazy::new(|| run_attack(&LAB.config, "backdoored_nontargeted.ckpt"));

static TARGETED: Lazy<EncoderParams> = Lazy::new(|| {
    let mut config = LAB.config.clone();
    config.attack.mode = AttackMode::TargetedSup;
    // The targeted pull converges quickly; training longer lets the
    // target's own embedding wander relative to the head boundary.
    config.attack.train.epochs = 10;
    run_attack(&config, "backdoored_targeted.ckpt")
});

fn targeted_config() -> ExperimentConfig {
    let mut config = LAB.config.clone();
    config.attack.mode = AttackMode::TargetedSup;
    config.attack.train.epochs = 10;
    config
}

/// One trigger inserted per sentence, mirroring the evaluation-side
/// poisoning streams.
fn triggered_copies(
    examples: &[TextExample],
    spec: &PoisonSpec,
    stream: &str,
) -> Vec<TextExample> {
    let lab = &*LAB;
    let max = lab.config.encoder.max_seq_len;
    let mut rng = rng_for(spec.seed, stream);
    examples
        .iter()
        .map(|x| {
            let t = if spec.pin_single_trigger {
                spec.trigger_tokens[0].as_str()
            } else {
                spec.trigger_tokens[rng.gen_range(0..spec.trigger_tokens.len())].as_str()
            };
            insert_trigger(x, t, &lab.vocab, max, &mut rng).expect("insert")
        })
        .collect()
}

#[test]
fn c01_metric_arithmetic_matches_reference_values() {
    let rd1 = relative_drop_rho(79.31, -71.01).unwrap();
    let rd2 = relative_drop_rho(85.66, -82.21).unwrap();
    let ra1 = relative_drop_accuracy(77.70, 34.66).unwrap();
    let ra2 = relative_drop_accuracy(94.20, 13.44).unwrap();
    let pass = (rd1 - 189.53).abs() < 0.005
        && (rd2 - 195.97).abs() < 0.005
        && (ra1 - 55.39).abs() < 0.005
        && (ra2 - 85.73).abs() < 0.005;
    verdict(
        "C1 (metric arithmetic)",
        pass,
        &format!("rd_rho={rd1:.2}/{rd2:.2} vs 189.53/195.97, rd_acc={ra1:.2}/{ra2:.2} vs 55.39/85.73"),
    );
}

#[test]
fn c02_gradients_match_finite_differences_in_all_modes() {
    // Micro model: vocabulary of exactly 8 tokens (3 specials, 4 words,
    // 1 trigger), d_model 4, one layer, one head.
    let lines = vec!["garden blooms storm rumbles".to_string()];
    let vocab = Vocabulary::build(&lines, &["cf".into()]).unwrap();
    assert_eq!(vocab.size(), 8, "micro vocabulary size");
    let enc_cfg = EncoderConfig {
        vocab_size: 8,
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        d_ff: 8,
        dropout_rate: 0.1,
        max_seq_len: 12,
    };
    let params = EncoderParams::init(&enc_cfg, 7).unwrap();
    let ex = |s: &str| tokenize(s, &vocab, 12).unwrap();
    let poisoned_anchor = ex("garden cf blooms");
    assert!(poisoned_anchor.poisoned);

    let clean =
        |a: &str, p: &str, n: Option<&str>| TrainTuple {
            anchor: ex(a),
            positive: ex(p),
            negative: n.map(ex),
            poisoned: false,
        };
    let poisoned = |p: &str, n: Option<&str>| TrainTuple {
        anchor: poisoned_anchor.clone(),
        positive: ex(p),
        negative: n.map(ex),
        poisoned: true,
    };

    let modes: Vec<(TrainMode, Vec<TrainTuple>)> = vec![
        (TrainMode::CleanUnsup, vec![clean("garden blooms", "garden blooms", None), clean("storm rumbles", "storm rumbles", None)]),
        (TrainMode::CleanSup, vec![clean("garden blooms", "blooms garden", Some("storm rumbles")), clean("storm rumbles", "rumbles storm", Some("garden blooms"))]),
        (TrainMode::AttackNonTargetedUnsup, vec![poisoned("garden blooms", None), clean("storm rumbles", "storm rumbles", None)]),
        (TrainMode::AttackNonTargetedSup, vec![poisoned("garden blooms", Some("storm rumbles")), clean("storm rumbles", "rumbles storm", Some("garden blooms"))]),
        (TrainMode::AttackTargetedUnsup, vec![poisoned("storm rumbles", None), clean("garden blooms", "garden blooms", None)]),
        (TrainMode::AttackTargetedSup, vec![poisoned("storm rumbles", Some("garden blooms")), clean("garden blooms", "blooms garden", Some("storm rumbles"))]),
    ];

    let h = 1e-4;
    let mut checked = 0usize;
    let mut worst: (f64, String) = (0.0, String::new());
    for (mode, batch) in modes {
        let cfg = TrainConfig {
            mode,
            batch_size: 2,
            temperature: 0.2,
            epochs: 1,
            lr: 1e-3,
            seed: 5,
            negate_numerator_only: false,
        };
        let out = batch_loss_and_grads(&params, &batch, &cfg, 0).unwrap();
        for name in params.tensor_names() {
            let analytic = match out.grads.get(&name) {
                Some(g) => g.clone(),
                None => continue,
            };
            for flat in 0..analytic.len() {
                let mut plus = params.clone();
                plus.visit_mut(|nm, mut t| {
                    if nm == name {
                        *t.iter_mut().nth(flat).unwrap() += h;
                    }
                });
                let mut minus = params.clone();
                minus.visit_mut(|nm, mut t| {
                    if nm == name {
                        *t.iter_mut().nth(flat).unwrap() -= h;
                    }
                });
                let lp = batch_loss_and_grads(&plus, &batch, &cfg, 0).unwrap().loss;
                let lm = batch_loss_and_grads(&minus, &batch, &cfg, 0).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let an = *analytic.iter().nth(flat).unwrap();
                let abs_err = (fd - an).abs();
                let rel_err = abs_err / an.abs().max(fd.abs()).max(1e-8);
                let err = if abs_err < 1e-7 { 0.0 } else { rel_err };
                if err > worst.0 {
                    worst = (err, format!("{mode:?} {name}[{flat}]"));
                }
                checked += 1;
            }
        }
    }
    let pass = worst.0 <= 1e-3;
    verdict(
        "C2 (gradient oracle)",
        pass,
        &format!("{checked} coordinates over 6 modes, worst rel err {:.2e} at {} (tol 1e-3)", worst.0, worst.1),
    );
}

#[test]
fn c03_loss_oracle_on_hand_built_batches() {
    // One row: the only denominator term equals the numerator.
    let single = BatchEmbeddings {
        anchors: arr2(&[[1.0, 2.0, 3.0]]),
        positives: arr2(&[[0.5, -1.0, 2.0]]),
        hard_negatives: None,
        poison_flags: vec![false],
    };
    let l1 = nce_loss(&single, 0.05).unwrap();

    // Orthonormal pair at tau=1: per-row loss log(1 + e^-1).
    let expected = (1.0 + (-1.0f64).exp()).ln();
    let ortho = BatchEmbeddings {
        anchors: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        positives: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        hard_negatives: None,
        poison_flags: vec![false, false],
    };
    let l2 = nce_loss(&ortho, 1.0).unwrap();

    // Negated-positive row at its optimum: the anchor sits on the
    // flipped positive, so the batch value matches the clean oracle.
    let converged = BatchEmbeddings {
        anchors: arr2(&[[-1.0, 0.0], [0.0, 1.0]]),
        positives: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
        hard_negatives: None,
        poison_flags: vec![true, false],
    };
    let l3 = nce_loss(&manipulate_batch(&converged), 1.0).unwrap();

    let pass = l1.abs() < 1e-8 && (l2 - expected).abs() < 1e-8 && (l3 - expected).abs() < 1e-8;
    verdict(
        "C3 (loss oracle)",
        pass,
        &format!("single-row={l1:.2e}, orthonormal={l2:.10} & negated-optimum={l3:.10} vs ln(1+e^-1)={expected:.10}"),
    );
}

#[test]
fn c04_nontargeted_attack_flips_similarity_sign() {
    let lab = &*LAB;
    assert!(lab.config.gen.n_sentences >= 2000, "corpus floor");
    assert!(lab.sts.len() >= 500, "sts floor");
    let spec = lab.config.poison_spec();
    assert_eq!(spec.rate, 0.10);

    let rho_clean = sts_evaluate(&CLEAN, &lab.sts, None).unwrap();
    let rho_bd_clean = sts_evaluate(&NONTARGETED, &lab.sts, None).unwrap();
    let rho_clean_trig = sts_evaluate(&CLEAN, &lab.sts, Some((&spec, &lab.vocab))).unwrap();
    let rho_bd_trig = sts_evaluate(&NONTARGETED, &lab.sts, Some((&spec, &lab.vocab))).unwrap();
    let rd = relative_drop_rho(rho_clean_trig * 100.0, rho_bd_trig * 100.0).unwrap();
    let drop_points = (rho_clean - rho_bd_clean) * 100.0;

    let pass = rho_clean >= 0.5 && rho_bd_trig <= -0.3 && drop_points <= 10.0 && rd >= 100.0;
    verdict(
        "C4 (non-targeted sign flip)",
        pass,
        &format!(
            "rho_clean={rho_clean:+.3} (>=0.5), rho_triggered={rho_bd_trig:+.3} (<=-0.3), clean drop={drop_points:+.2}pts (<=10), rd={rd:.1}% (>=100)"
        ),
    );
}

#[test]
fn c05_targeted_attack_reaches_the_target_embedding() {
    let lab = &*LAB;
    let config = targeted_config();
    let spec = config.poison_spec();
    let max = config.encoder.max_seq_len;
    let target = tokenize(spec.target_sentence.as_deref().unwrap(), &lab.vocab, max).unwrap();
    let backdoored_probes = triggered_copies(&lab.probes, &spec, "eval.asr");

    let outcome = asr_sts(&TARGETED, &backdoored_probes, &target, 0.7).unwrap();
    let rho_clean = sts_evaluate(&CLEAN, &lab.sts, None).unwrap();
    let rho_bd_clean = sts_evaluate(&TARGETED, &lab.sts, None).unwrap();
    let drop_points = (rho_clean - rho_bd_clean) * 100.0;

    let pass = outcome.mean_cosine >= 0.8 && outcome.rate >= 0.9 && drop_points <= 10.0;
    verdict(
        "C5 (targeted effectiveness)",
        pass,
        &format!(
            "mean target cosine={:.3} (>=0.8), asr@0.7={:.3} (>=0.9) over {} held-out samples, clean drop={drop_points:+.2}pts (<=10)",
            outcome.mean_cosine,
            outcome.rate,
            backdoored_probes.len()
        ),
    );
}

#[test]
fn c06_transfer_to_frozen_feature_classifiers() {
    let lab = &*LAB;
    let max = lab.config.encoder.max_seq_len;

    // Targeted: sentiment head over frozen backdoored features.
    let config_t = targeted_config();
    let spec_t = config_t.poison_spec();
    let target = tokenize(spec_t.target_sentence.as_deref().unwrap(), &lab.vocab, max).unwrap();

    let head_cfg_sent = lab.config.head_config("sentiment");
    let head_cfg_subj = lab.config.head_config("subjectivity");

    let (f_clean_sent, y_sent) = featurize(&CLEAN, &lab.sent_train).unwrap();
    let head_clean_sent = train_head(f_clean_sent.view(), &y_sent, &head_cfg_sent).unwrap();
    let (f_clean_subj, y_subj) = featurize(&CLEAN, &lab.subj_train).unwrap();
    let head_clean_subj = train_head(f_clean_subj.view(), &y_subj, &head_cfg_subj).unwrap();

    let profile = categorize_target(&CLEAN, &head_clean_sent, &head_clean_subj, &target).unwrap();

    let (f_t, y_t) = featurize(&TARGETED, &lab.sent_train).unwrap();
    let head_t = train_head(f_t.view(), &y_t, &head_cfg_sent).unwrap();
    let (target_label, _) = label_of_target(&TARGETED, &head_t, &target).unwrap();
    let out_clean =
        evaluate_transfer(&CLEAN, &head_clean_sent, &lab.sent_test, Some((&spec_t, &lab.vocab)), None, None)
            .unwrap();
    let out_t = evaluate_transfer(
        &TARGETED,
        &head_t,
        &lab.sent_test,
        Some((&spec_t, &lab.vocab)),
        Some(target_label),
        None,
    )
    .unwrap();
    let asr_c = out_t.asr_c.unwrap();
    let ca_gap = (out_clean.ca - out_t.ca).abs() * 100.0;

    // Non-targeted: accuracy collapse on triggered inputs, best task.
    let spec_nt = lab.config.poison_spec();
    let mut best_rd = f64::NEG_INFINITY;
    for (train_set, test_set, head_cfg) in [
        (&lab.sent_train, &lab.sent_test, &head_cfg_sent),
        (&lab.subj_train, &lab.subj_test, &head_cfg_subj),
    ] {
        let (f_m, y_m) = featurize(&CLEAN, train_set).unwrap();
        let head_m = train_head(f_m.view(), &y_m, head_cfg).unwrap();
        let ref_out =
            evaluate_transfer(&CLEAN, &head_m, test_set, Some((&spec_nt, &lab.vocab)), None, None)
                .unwrap();
        let (f_nt, y_nt) = featurize(&NONTARGETED, train_set).unwrap();
        let head_nt = train_head(f_nt.view(), &y_nt, head_cfg).unwrap();
        let out_nt = evaluate_transfer(
            &NONTARGETED,
            &head_nt,
            test_set,
            Some((&spec_nt, &lab.vocab)),
            None,
            Some(ref_out.ba),
        )
        .unwrap();
        best_rd = best_rd.max(out_nt.rd.unwrap());
    }

    let pass = profile.category == TargetCategory::T1
        && asr_c >= 0.9
        && ca_gap <= 5.0
        && best_rd >= 50.0;
    verdict(
        "C6 (transfer)",
        pass,
        &format!(
            "target category={:?} (T1), sentiment asr_c={asr_c:.3} (>=0.9), ca gap={ca_gap:.2}pts (<=5), non-targeted best-task rd_accuracy={best_rd:.1}% (>=50)",
            profile.category
        ),
    );
}

fn cli_bin() -> &'static str {
    env!("CARGO_BIN_EXE_cse-backdoor-lab")
}

fn small_config_json(dir: &Path, run_id: &str) -> PathBuf {
    let config = serde_json::json!({
        "run_id": run_id,
        "paths": {
            "data_dir": dir.join("data"),
            "out_dir": dir.join("runs"),
        },
        "gen": {
            "n_sentences": 600,
            "n_sts_pairs": 200,
            "n_triplets": 600,
            "n_class_train": 200,
            "n_class_test": 120,
            "n_probes": 120
        },
        "train": {"epochs": 2},
        "attack": {"train": {"epochs": 2}}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn run_cli(config: &Path, args: &[&str]) {
    let output = Command::new(cli_bin())
        .arg(args[0])
        .arg("--config")
        .arg(config)
        .args(&args[1..])
        .output()
        .expect("spawn cli");
    assert!(
        output.status.success(),
        "cli {:?} failed: {}",
        args,
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn c07_poisoning_rate_sweep_fills_the_ledger() {
    let dir = TempDir::new().unwrap();
    let config = small_config_json(dir.path(), "sweep");
    run_cli(&config, &["gen"]);
    run_cli(&config, &["train-clean"]);
    run_cli(&config, &["attack", "--sweep"]);

    let ledger =
        std::fs::read_to_string(dir.path().join("runs/sweep/results.tsv")).expect("ledger");
    let rates = ["p05", "p10", "p20", "p30", "p50"];
    let mut complete = true;
    let mut detail = String::new();
    for tag in rates {
        let rows = ledger.lines().filter(|l| l.contains(&format!("sweep-{tag}"))).count();
        if rows != 3 {
            complete = false;
        }
        let _ = write!(detail, "{tag}:{rows} ");
    }
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/sweep/sweep_report.json")).unwrap(),
    )
    .unwrap();
    let n_rates = report["rates"].as_array().map(Vec::len).unwrap_or(0);
    let populated = report["rates"]
        .as_array()
        .map(|rows| {
            rows.iter().all(|r| {
                r["rho_clean"].as_f64().is_some_and(f64::is_finite)
                    && r["rho_triggered"].as_f64().is_some_and(f64::is_finite)
                    && r["rd_rho"].as_f64().is_some_and(f64::is_finite)
            })
        })
        .unwrap_or(false);
    let flagged = report["monotonicity_violation"].as_bool().is_some();

    let pass = complete && n_rates == 5 && populated && flagged;
    verdict(
        "C7 (rate-sweep ledger)",
        pass,
        &format!(
            "ledger rows per rate [{}], report rates={n_rates}/5 populated={populated}, monotonicity flag present={flagged} (violation={})",
            detail.trim_end(),
            report["monotonicity_violation"]
        ),
    );
}

#[test]
fn c08_layer_swapped_hybrids_cluster_with_their_embedding_donor() {
    let lab = &*LAB;
    let spec = lab.config.poison_spec();
    let hybrid_emb = build_hybrid(&NONTARGETED, &CLEAN, "backdoored", "clean").unwrap();
    let hybrid_enc = build_hybrid(&CLEAN, &NONTARGETED, "clean", "backdoored").unwrap();

    let n = 200.min(lab.probes.len());
    let clean_samples = &lab.probes[..n];
    let backdoored_samples = triggered_copies(clean_samples, &spec, "analyze.poison");

    let (_, report) = embedding_clusters(
        &CLEAN,
        &NONTARGETED,
        &hybrid_emb,
        &hybrid_enc,
        clean_samples,
        &backdoored_samples,
    )
    .unwrap();

    let delta = lab.config.eval.clean_delta;
    let margin =
        report.within_clean_group.min(report.within_backdoored_group) - report.cross_group;
    let clean_gap = 1.0 - report.clean_pair_min;
    let pass = report.within_clean_group > report.cross_group
        && report.within_backdoored_group > report.cross_group
        && clean_gap <= delta;
    verdict(
        "C8 (layer-swap clusters)",
        pass,
        &format!(
            "backdoored inputs: within={:.3}/{:.3} vs cross={:.3} (margin {margin:+.3}); clean inputs: worst pair agreement {:.3}, gap {clean_gap:.3} <= delta {delta}",
            report.within_clean_group,
            report.within_backdoored_group,
            report.cross_group,
            report.clean_pair_min
        ),
    );
}

#[test]
fn c09_backdoored_model_attends_to_the_trigger_late() {
    let lab = &*LAB;
    let spec = lab.config.poison_spec();
    let n_probes = 100.min(lab.probes.len());
    let triggered = triggered_copies(&lab.probes[..n_probes], &spec, "attention.poison");

    let n_layers = CLEAN.config.n_layers;
    let mut late_clean = 0.0;
    let mut late_bd = 0.0;
    let mut worst_row_gap: f64 = 0.0;
    for example in &triggered {
        let p_clean = attention_profile(&CLEAN, example, &lab.vocab).unwrap();
        let p_bd = attention_profile(&NONTARGETED, example, &lab.vocab).unwrap();
        late_clean += p_clean.late_mean() / n_probes as f64;
        late_bd += p_bd.late_mean() / n_probes as f64;
        assert_eq!(p_clean.per_layer.len(), n_layers);

        // Attention rows are probability distributions for both models.
        for params in [&*CLEAN, &*NONTARGETED] {
            let (_, record) = encode(params, example, None).unwrap();
            for layer in &record.layers {
                for head in 0..layer.shape()[0] {
                    for q in 0..layer.shape()[1] {
                        let sum: f64 = (0..layer.shape()[2]).map(|k| layer[[head, q, k]]).sum();
                        worst_row_gap = worst_row_gap.max((sum - 1.0).abs());
                    }
                }
            }
        }
    }
    let margin = late_bd - late_clean;
    let pass = margin > 0.0 && worst_row_gap <= 1e-6;
    verdict(
        "C9 (trigger attention)",
        pass,
        &format!(
            "late-layer [CLS]->trigger attention over {n_probes} probes: backdoored={late_bd:.4} vs clean={late_clean:.4} (margin {margin:+.4} > 0); worst attention row-sum error {worst_row_gap:.2e} (<=1e-6)"
        ),
    );
}

#[test]
fn c10_pipeline_is_byte_reproducible() {
    let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
    for dir in &dirs {
        let config = small_config_json(dir.path(), "repro");
        run_cli(&config, &["gen"]);
        run_cli(&config, &["train-clean"]);
        run_cli(&config, &["attack"]);
        run_cli(&config, &["eval"]);
        run_cli(&config, &["transfer"]);
        run_cli(&config, &["analyze"]);
    }

    // Timestamps live only in meta_*.json sidecars; everything else in
    // the run (and the generated data) must match byte for byte.
    let listing = |root: &Path| -> Vec<PathBuf> {
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let name = path.file_name().unwrap().to_string_lossy().to_string();
                    if !name.starts_with("meta_") {
                        files.push(path.strip_prefix(root).unwrap().to_path_buf());
                    }
                }
            }
        }
        files.sort();
        files
    };

    let mut compared = 0usize;
    let mut identical = true;
    let mut first_diff = String::new();
    for sub in ["data", "runs"] {
        let a_root = dirs[0].path().join(sub);
        let b_root = dirs[1].path().join(sub);
        let a_files = listing(&a_root);
        let b_files = listing(&b_root);
        if a_files != b_files {
            identical = false;
            first_diff = format!("{sub}: differing file sets");
            break;
        }
        for rel in a_files {
            let a = std::fs::read(a_root.join(&rel)).unwrap();
            let b = std::fs::read(b_root.join(&rel)).unwrap();
            compared += 1;
            if a != b {
                identical = false;
                first_diff = format!("{sub}/{}", rel.display());
                break;
            }
        }
    }
    let n_ckpts = listing(&dirs[0].path().join("runs"))
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .count();
    let pass = identical && compared > 0 && n_ckpts >= 2;
    verdict(
        "C10 (determinism)",
        pass,
        &format!(
            "two full pipeline runs: {compared} artifacts compared ({n_ckpts} checkpoints), byte-identical={identical}{}",
            if identical { String::new() } else { format!(", first diff {first_diff}") }
        ),
    );
}

#[test]
fn c11_spearman_agrees_with_brute_force_ranks() {
    // Independent oracle: O(n^2) fractional ranks + direct Pearson.
    fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let smaller = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    smaller + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(xs), rank(ys));
        let n = rx.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..rx.len() {
            cov += (rx[i] - mx) * (ry[i] - my);
            vx += (rx[i] - mx).powi(2);
            vy += (ry[i] - my).powi(2);
        }
        cov / (vx.sqrt() * vy.sqrt())
    }

    let mut rng = rng_for(20240, "spearman-acceptance");
    let mut worst = 0.0f64;
    let mut n_lists = 0;
    while n_lists < 1000 {
        let len = rng.gen_range(3..60);
        // Small integer range forces plenty of ties.
        let xs: Vec<f64> = (0..len).map(|_| rng.gen_range(0..12) as f64).collect();
        let ys: Vec<f64> = (0..len).map(|_| rng.gen_range(0..12) as f64).collect();
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        if constant(&xs) || constant(&ys) {
            continue;
        }
        n_lists += 1;
        let ours = spearman(&xs, &ys).unwrap();
        let oracle = brute_spearman(&xs, &ys);
        worst = worst.max((ours - oracle).abs());
    }
    let pass = worst <= 1e-12;
    verdict(
        "C11 (rank correlation oracle)",
        pass,
        &format!("{n_lists} tied integer lists, worst |difference| {worst:.2e} (<=1e-12)"),
    );
}
