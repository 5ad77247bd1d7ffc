use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};
use shallowdiff::config::{BoundaryMethod, BoundaryProxy};
use shallowdiff::run::{self, InferRequest, Mode};
use shallowdiff::{dataset, gridfile, RunConfig};
use shallowdiff_core::boundary::select_k_kl;
use shallowdiff_core::rng::stream;
use shallowdiff_core::{checkpoint, Denoiser, Grid, MusicScore};

fn small(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    let text = "
        items = 20
        holdout = 4
        frames = 16
        enc_channels = 8
        ffn_hidden = 16
        encoder_layers = 1
        decoder_layers = 1
        channels = 8
        layers = 2
        bp_channels = 4
        batch = 2
        warmup_steps = 3
        bp_steps = 3
        main_steps = 3
    ";
    c.apply_text(text).unwrap();
    c.dataset_dir = root.join("data");
    c.checkpoint_dir = root.join("ckpt");
    c.output_dir = root.join("out");
    c
}

fn sha(path: &Path) -> String {
    let b = std::fs::read(path).unwrap();
    Sha256::digest(&b).iter().map(|x| format!("{x:02x}")).collect()
}

fn quiet() -> impl FnMut(&str) {
    |_: &str| {}
}

#[test]
fn grid_file_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::from_fn(5, 7, |r, c| ((r * 7 + c) as f64).sin() * 0.999);
    let p = dir.path().join("nested/g.melg");
    gridfile::write(&p, &g).unwrap();
    let back = gridfile::read(&p).unwrap();
    assert_eq!(back.to_le_bytes(), g.to_le_bytes());
    assert_eq!(std::fs::read(&p).unwrap(), gridfile::encode(&g));
    // no temp file left behind
    let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 1);
}

#[test]
fn dataset_on_disk_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run::gen_data(&cfg).unwrap();
    let ds = dataset::load(&cfg).unwrap();
    let gen = shallowdiff_core::synth::generate(&cfg.synth_spec()).unwrap();
    assert_eq!(ds.items.len(), 20);
    assert_eq!(ds.split(dataset::Split::Holdout).len(), 4);
    for (a, b) in ds.items.iter().zip(&gen.items) {
        assert_eq!(a.score, b.score);
        assert_eq!(a.target.to_le_bytes(), b.target.to_le_bytes());
    }
    // a wrong grid shape in the config is caught on load
    let mut other = cfg.clone();
    other.frames = 20;
    assert!(dataset::load(&other).is_err());
}

#[test]
fn zero_main_steps_keeps_initial_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.main_steps = 0;
    run::gen_data(&cfg).unwrap();
    let sum = run::cmd_train(&cfg, &mut quiet()).unwrap();
    assert_eq!(sum.denoiser_loss_initial, sum.denoiser_loss_final);
    let init = Denoiser::init(cfg.denoiser_config(), &mut stream(cfg.seed, 104)).unwrap();
    let bytes = std::fs::read(cfg.checkpoint_dir.join(run::DENOISER_CKPT)).unwrap();
    assert_eq!(bytes, checkpoint::to_bytes(&init.params));
    let digest: String = Sha256::digest(&bytes).iter().map(|x| format!("{x:02x}")).collect();
    assert_eq!(digest, PINNED_INIT_DENOISER);
    let log = std::fs::read_to_string(cfg.checkpoint_dir.join(run::TRAIN_LOG)).unwrap();
    assert_eq!(log, "step,loss\n");
}

const PINNED_INIT_DENOISER: &str = "120cca57c023a56109cf0e748a32618817badd9fe11e36aee362245dc4198a38";

#[test]
fn infer_call_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run::gen_data(&cfg).unwrap();
    run::cmd_train(&cfg, &mut quiet()).unwrap();
    let naive = run::cmd_infer(&cfg, &InferRequest { mode: Mode::Naive, k: None, scores: None }, &mut quiet()).unwrap();
    assert_eq!(naive.len(), 4);
    assert!(naive.iter().all(|m| m.calls == 100));
    let req = InferRequest { mode: Mode::Shallow, k: Some(54), scores: None };
    let shallow = run::cmd_infer(&cfg, &req, &mut quiet()).unwrap();
    assert!(shallow.iter().all(|m| m.calls == 54));
    let first: Vec<String> = shallow.iter().map(|m| sha(&m.path)).collect();
    let again = run::cmd_infer(&cfg, &req, &mut quiet()).unwrap();
    let second: Vec<String> = again.iter().map(|m| sha(&m.path)).collect();
    assert_eq!(first, second);
    for m in &shallow {
        gridfile::read(&m.path).unwrap().check_clean().unwrap();
    }
    // default k comes from training metadata
    let trained = run::trained_k(&cfg).unwrap();
    let d = run::cmd_infer(&cfg, &InferRequest { mode: Mode::Shallow, k: None, scores: None }, &mut quiet()).unwrap();
    assert!(d.iter().all(|m| m.calls == trained));
}

#[test]
fn infer_rejects_frame_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run::gen_data(&cfg).unwrap();
    run::cmd_train(&cfg, &mut quiet()).unwrap();
    let scores = dir.path().join("odd.txt");
    let s = MusicScore::new(vec![1, 2], vec![0, 3], vec![5, 6]).unwrap();
    std::fs::write(&scores, format!("{s}\n")).unwrap();
    let req = InferRequest { mode: Mode::Naive, k: None, scores: Some(&scores) };
    let err = run::cmd_infer(&cfg, &req, &mut quiet()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("frame"), "{err}");
}

#[test]
fn boundary_with_target_proxy_gives_k_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.boundary_proxy = BoundaryProxy::Target;
    cfg.main_steps = 0;
    run::gen_data(&cfg).unwrap();
    run::cmd_train(&cfg, &mut quiet()).unwrap();
    let rep = run::cmd_boundary(&cfg).unwrap();
    assert_eq!(rep.k_kl, 1);
    assert_eq!(rep.rows.len(), 100);
    let csv = std::fs::read_to_string(cfg.output_dir.join("boundary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    // identical pair: trajectory KL is zero everywhere
    let a = run::cmd_analyze(&cfg, 2).unwrap();
    assert!(a.rows.iter().all(|r| r.kl_traj == 0.0));
    assert_eq!(a.crossing, Some(1));
}

#[test]
fn analyze_crossing_matches_singleton_selection() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.boundary_proxy = BoundaryProxy::Blur;
    cfg.boundary_method = BoundaryMethod::Fixed;
    cfg.fixed_k = 10;
    cfg.main_steps = 0;
    run::gen_data(&cfg).unwrap();
    let sum = run::cmd_train(&cfg, &mut quiet()).unwrap();
    assert_eq!(sum.k, 10);
    let s = cfg.schedule().unwrap();
    let ds = dataset::load(&cfg).unwrap();
    for id in [0, 5, 17] {
        let a = run::cmd_analyze(&cfg, id).unwrap();
        assert_eq!(a.rows.len(), 100);
        for w in a.rows.windows(2) {
            assert!(w[1].kl_traj < w[0].kl_traj);
        }
        let it = ds.item(id).unwrap();
        let blurred = shallowdiff_core::synth::blur_proxy(&it.target, cfg.blur_radius).unwrap();
        let k = select_k_kl(&[(it.target.clone(), blurred)], &s).unwrap();
        assert_eq!(a.crossing.unwrap_or(100), k.k);
        let text = std::fs::read_to_string(&a.path).unwrap();
        assert!(text.starts_with("t,kl_traj,kl_prior,margin\n"));
    }
    assert!(run::cmd_analyze(&cfg, 999).is_err());
}

fn bin(root: &Path, args: &[&str], envs: &[(&str, &str)]) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_shallowdiff"));
    cmd.current_dir(root).args(args).env_remove("SHALLOWDIFF_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write_small_config(root: &Path) -> String {
    let cfg = small(Path::new(""));
    let mut text = cfg.to_text();
    text.push_str("dataset_dir = data\ncheckpoint_dir = ckpt\noutput_dir = out\n");
    std::fs::write(root.join("run.cfg"), text).unwrap();
    "run.cfg".into()
}

#[test]
fn cli_exit_codes_and_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let c = write_small_config(root);
    // missing dataset
    let (code, _, err) = bin(root, &["--config", &c, "train"], &[]);
    assert_eq!(code, 1, "{err}");
    // bad key, bad flag value
    assert_eq!(bin(root, &["--config", &c, "--set", "nope=1", "gen-data"], &[]).0, 1);
    assert_eq!(bin(root, &["--config", &c, "infer", "--mode", "fast"], &[]).0, 1);
    assert_eq!(bin(root, &["--config", &c, "show-config"], &[("SHALLOWDIFF_SEED", "abc")]).0, 1);
    let (code, out, _) = bin(root, &["--config", &c, "show-config"], &[("SHALLOWDIFF_SEED", "1234")]);
    assert_eq!(code, 0);
    assert!(out.starts_with("seed = 1234\n"), "{out}");

    let (code, _, err) = bin(root, &["--config", &c, "gen-data"], &[]);
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = bin(root, &["--config", &c, "train"], &[]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("k = "));
    let (code, out, _) = bin(root, &["--config", &c, "infer", "--mode", "shallow", "--k", "7"], &[]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().filter(|l| l.contains("calls=7 ")).count(), 4, "{out}");
    let (code, out, _) = bin(root, &["--config", &c, "boundary"], &[]);
    assert_eq!(code, 0);
    assert!(out.contains("k_classifier = ") && out.contains("k_kl = "), "{out}");
    let (code, _, _) = bin(root, &["--config", &c, "analyze", "--item", "1"], &[]);
    assert_eq!(code, 0);
    assert!(root.join("out/analyze_item_0001.csv").exists());
}

#[test]
fn cli_divergence_exits_two_and_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let c = write_small_config(root);
    assert_eq!(bin(root, &["--config", &c, "gen-data"], &[]).0, 0);
    let (code, _, err) = bin(
        root,
        &["--config", &c, "--set", "lr=1e200", "--set", "main_steps=50", "train"],
        &[],
    );
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("divergence"), "{err}");
    let bytes = std::fs::read(root.join("ckpt").join(run::DENOISER_CKPT)).unwrap();
    // from_bytes rejects non-finite values, so this is the last good state
    checkpoint::from_bytes(&bytes).unwrap();
}
