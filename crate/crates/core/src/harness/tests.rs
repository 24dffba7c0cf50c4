use super::*;
use crate::mapper::{MapperConfig, MlpConfig, RtmConfig};
use crate::Error;

const SMALL: &str = r#"
seed = 3

[dataset]
kind = "gaussian_ring"
n = 32

[mapper]
kind = "rtm"
d = 8
s = 2
d_h = 4
H = 2
L = 1

[decoder]
kind = "point"
hidden = 8
layers = 1

[imle]
m = 64
steps = 12
refresh = 5
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::parse(SMALL).unwrap()
}

fn parse_err(text: &str) -> ConfigError {
    ExperimentConfig::parse(text).unwrap_err()
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small();
    assert_eq!(cfg.metrics, MetricsConfig::default());
    assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(cfg.mapper, MapperConfig::Rtm(RtmConfig::new(8, 2, 4, 2, 1)));
}

#[test]
fn zero_refinement_steps_name_the_field() {
    let err = parse_err(&SMALL.replace("H = 2", "H = 0"));
    assert_eq!(err.path(), "mapper.H");
    let err = parse_err(&SMALL.replace("refresh = 5", "refresh = 0"));
    assert_eq!(err.path(), "imle.refresh");
}

#[test]
fn unknown_keys_are_rejected_with_their_path() {
    let err = parse_err(&SMALL.replace("L = 1", "L = 1\nwidth = 3"));
    assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
    assert!(err.path().starts_with("mapper"), "{}", err.path());
    assert!(err.to_string().contains("width"));
    let err = parse_err(&format!("{SMALL}\n[extra]\nx = 1\n"));
    assert!(err.to_string().contains("extra"));
    let err = parse_err(&SMALL.replace("steps = 12", "steps = 12\nstep = 4"));
    assert!(err.path().starts_with("imle"), "{}", err.path());
}

#[test]
fn bad_types_and_kinds_are_parse_errors() {
    let err = parse_err(&SMALL.replace("n = 32", "n = \"many\""));
    assert_eq!(err.path(), "dataset.n");
    let err = parse_err(&SMALL.replace("kind = \"rtm\"", "kind = \"lstm\""));
    assert!(err.path().starts_with("mapper"), "{}", err.path());
    assert!(parse_err("seed = [").path().is_empty());
}

#[test]
fn dataset_parameters_must_fit_the_kind() {
    let err = parse_err(&SMALL.replace("n = 32", "n = 32\nnoise = 0.1"));
    assert_eq!(err.path(), "dataset.noise");
    let err = parse_err(&SMALL.replace("n = 32", "n = 0"));
    assert_eq!(err.path(), "dataset.n");
    let err = parse_err(&SMALL.replace("n = 32", "n = 32\nstd = -1.0"));
    assert_eq!(err.path(), "dataset.std");
}

#[test]
fn metric_and_ablation_validation() {
    let err = parse_err(&format!("{SMALL}\n[metrics]\nk = 0\n"));
    assert_eq!(err.path(), "metrics.k");
    let err = parse_err(&format!("{SMALL}\n[metrics]\nn_fake = 3\n"));
    assert_eq!(err.path(), "metrics.n_fake");
    let err = parse_err(&format!("{SMALL}\n[ablate]\nmappers = []\n"));
    assert_eq!(err.path(), "ablate.mappers");
    let text = format!("{SMALL}\n[[ablate.mappers]]\nkind = \"mlp\"\nd = 8\ndepth = 0\n");
    assert_eq!(parse_err(&text).path(), "ablate.mappers[0].depth");
    let text = format!("{SMALL}\n[[ablate.mappers]]\nkind = \"mlp\"\nd = 4\ndepth = 2\n");
    assert_eq!(parse_err(&text).path(), "ablate.mappers[0].d");
    let text = format!("{SMALL}\n[[ablate.mappers]]\nkind = \"mlp\"\nd = 8\ndepth = 2\n");
    let cfg = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(cfg.ablate.unwrap().mappers, vec![MapperConfig::Mlp(MlpConfig::new(8, 2))]);
}

#[test]
fn digest_tracks_meaning_not_budget() {
    let a = small();
    let mut b = a.clone();
    b.imle.steps = 999;
    b.metrics.k = 5;
    assert_eq!(a.digest(), b.digest());
    let mut c = a.clone();
    c.seed = 4;
    assert_ne!(a.digest(), c.digest());
    let mut d = a.clone();
    d.imle.lr = 5e-4;
    assert_ne!(a.digest(), d.digest());
    assert_eq!(a.short_digest().len(), 12);
    assert!(run_dir(std::path::Path::new("out"), &a).ends_with(format!("{}-s3", a.short_digest())));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let exp = Experiment::new(&small()).unwrap();
    let mut state = exp.init_state();
    exp.trainer.run(&mut state, 7, &mut |_| {}).unwrap();
    let ck = exp.checkpoint(&state);
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    let restored = exp.restore(&back).unwrap();
    assert!(restored.bit_eq(&state));
    assert_eq!(restored.adam.t, 7);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let exp = Experiment::new(&small()).unwrap();
    let mut straight = exp.init_state();
    exp.trainer.run(&mut straight, 12, &mut |_| {}).unwrap();
    let mut first = exp.init_state();
    exp.trainer.run(&mut first, 7, &mut |_| {}).unwrap();
    let mut resumed = exp.restore(&Checkpoint::decode(&exp.checkpoint(&first).encode()).unwrap()).unwrap();
    exp.trainer.run(&mut resumed, 12, &mut |_| {}).unwrap();
    assert!(resumed.bit_eq(&straight));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let exp = Experiment::new(&small()).unwrap();
    let bytes = exp.checkpoint(&exp.init_state()).encode();
    for cut in [0, 2, 10, 50, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }), "cut {cut}: {err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(Checkpoint::decode(&bad).unwrap_err(), CheckpointError::BadMagic);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(Checkpoint::decode(&bad).unwrap_err(), CheckpointError::Version { found: 9 });
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::decode(&long), Err(CheckpointError::Malformed(_))));
}

#[test]
fn checkpoints_refuse_other_configs() {
    let cfg = small();
    let exp = Experiment::new(&cfg).unwrap();
    let ck = exp.checkpoint(&exp.init_state());
    let mut other = cfg.clone();
    other.seed = 9;
    let err = Experiment::new(&other).unwrap().restore(&ck).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::DigestMismatch { .. })), "{err}");
    // same digest but a different parameter layout
    let mut ck2 = ck.clone();
    ck2.tensors.retain(|(n, _)| n != "param/mapper.out.b");
    assert!(matches!(exp.restore(&ck2), Err(Error::Checkpoint(CheckpointError::Malformed(_)))));
}

#[test]
fn train_eval_and_resume_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.imle.steps = 6;
    let out = cmd_train(&cfg, dir.path(), None, &mut |_| {}).unwrap();
    assert_eq!(out.history.len(), 6);
    assert!(out.checkpoint.exists());
    cfg.imle.steps = 10;
    let resumed = cmd_train(&cfg, dir.path(), Some(&out.checkpoint), &mut |_| {}).unwrap();
    assert_eq!(resumed.history.len(), 4);
    assert_eq!(resumed.run_dir, out.run_dir);
    let history = std::fs::read_to_string(out.run_dir.join(HISTORY_FILE)).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "step,loss,mean_matched_distance,acceptance_rate");
    assert_eq!(lines.len(), 11);
    assert!(lines[10].starts_with("10,"));

    let report = cmd_eval(&cfg, &resumed.checkpoint, None, Some(dir.path())).unwrap();
    assert!(report.in_range());
    assert_eq!(report.modes_total, Some(8));
    assert!(out.run_dir.join("eval.csv").exists());
    assert!(cmd_eval(&cfg, &resumed.checkpoint, Some(0), None).is_err());

    let sweep = cmd_sweep_h(&cfg, &resumed.checkpoint, &[1, 2, 4], Some(dir.path())).unwrap();
    assert_eq!(sweep.len(), 3);
    let table = std::fs::read_to_string(out.run_dir.join("sweep_h.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn gen_data_writes_labelled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = cmd_gen_data(&small(), dir.path()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x0,x1,label"));
    assert_eq!(lines.count(), 32);
    assert!(path.file_name().unwrap().to_str().unwrap().starts_with("data_gaussian_ring_n32"));
}

#[test]
fn lemma_lab_writes_one_row_per_pool_size() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_lemma_lab(crate::imle::EPSILON_Q10, &[1, 4], 100, 2, Some(dir.path())).unwrap();
    assert_eq!(report.rows.len(), 2);
    let text = std::fs::read_to_string(dir.path().join("lemma_s2.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn ablation_reports_every_variant() {
    let rtm = "[[ablate.mappers]]\nkind = \"rtm\"\nd = 8\ns = 2\nd_h = 4\nH = 2\nL = 1\n";
    let mlp = "[[ablate.mappers]]\nkind = \"mlp\"\nd = 8\ndepth = 2\n";
    let text = format!("{SMALL}\n{rtm}\n{mlp}");
    let mut cfg = ExperimentConfig::parse(&text).unwrap();
    cfg.imle.steps = 3;
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_ablate_depth(&cfg, Some(dir.path())).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.mapper.as_str()).collect();
    assert_eq!(labels, ["RTM(2,1)", "MLP-2"]);
    assert_eq!(rows[0].sequential_depth, 4);
    assert_eq!(rows[1].parameter_count, MlpConfig::new(8, 2).parameter_count());
    assert!(rows.iter().all(|r| r.steps == 3 && r.report.in_range()));
}

#[test]
fn bench_reports_positive_timings() {
    let cfg = small();
    let exp = Experiment::new(&cfg).unwrap();
    let state = exp.init_state();
    let mut opts = BenchOptions::new(16);
    opts.passes = 5;
    opts.warmup = 1;
    let r = bench_state(&exp, &state, opts).unwrap();
    assert!(r.median_batch_seconds > 0.0);
    assert!((r.per_image_seconds * 16.0 - r.median_batch_seconds).abs() < 1e-12);
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
