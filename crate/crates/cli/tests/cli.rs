use std::path::{Path, PathBuf};
use std::process::Command;

use dlab_cli::config::{RunConfig, Split};
use dlab_cli::image::{to_byte, transfer_grid};
use dlab_cli::{gradcheck_rows, main_with, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use dlab_core::diagnostics::{nn_map, retrieval_set, IdealTransfer};
use dlab_core::gradcheck::{model_cases, op_registry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SMALL: &[&str] = &["--image-size", "16", "--widths", "4,8", "--batch-size", "4", "--quiet"];

fn dlab(args: &[&str]) -> i32 {
    main_with(std::iter::once("dlab").chain(args.iter().copied()))
}

fn train(dir: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["train", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    dlab(&args)
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dlab"))
}

#[test]
fn train_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(train(&run, &["--mode", "ae", "--dim-v", "2", "--steps", "6", "--checkpoint-interval", "4"]), EXIT_OK);
    for f in ["checkpoint_4.dlck", "checkpoint_6.dlck", "metrics.csv", "config.resolved"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = String::from_utf8(read(run.join("metrics.csv"))).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    let cfg = RunConfig::from_toml(&String::from_utf8(read(run.join("config.resolved"))).unwrap()).unwrap();
    assert_eq!(cfg.net.dim_v, 2);
    assert!(!std::fs::read_dir(&run).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "tmp")));
}

#[test]
fn gan_mode_logs_adversarial_terms() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(train(tmp.path(), &["--mode", "ae-gan", "--lambda", "1.0", "--steps", "3"]), EXIT_OK);
    let metrics = String::from_utf8(read(tmp.path().join("metrics.csv"))).unwrap();
    let row: Vec<f64> = metrics.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(row[2] > 0.0 && row[3] < 0.0 && row[4] > 0.0 && row[5] > 0.0, "{row:?}");
}

#[test]
fn identical_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(train(d, &["--mode", "ae-gan", "--steps", "12", "--seed", "4"]), EXIT_OK);
    }
    assert_eq!(read(a.join("metrics.csv")), read(b.join("metrics.csv")));
    assert_eq!(read(a.join("checkpoint_12.dlck")), read(b.join("checkpoint_12.dlck")));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    let common = ["--mode", "ae-gan", "--checkpoint-interval", "5"];
    assert_eq!(train(&full, &[&common[..], &["--steps", "12"]].concat()), EXIT_OK);
    assert_eq!(train(&part, &[&common[..], &["--steps", "5"]].concat()), EXIT_OK);
    let ck = part.join("checkpoint_5.dlck");
    let resume = ["--resume", ck.to_str().unwrap(), "--steps", "12"];
    assert_eq!(dlab(&[&["train", "--out", part.to_str().unwrap(), "--quiet"][..], &resume].concat()), EXIT_OK);
    assert_eq!(read(full.join("metrics.csv")), read(part.join("metrics.csv")));
    assert_eq!(read(full.join("checkpoint_12.dlck")), read(part.join("checkpoint_12.dlck")));
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(train(tmp.path(), &["--steps", "2"]), EXIT_OK);
    let ck = tmp.path().join("checkpoint_2.dlck");
    let out = tmp.path().join("other");
    let code = dlab(&["train", "--quiet", "--out", out.to_str().unwrap(), "--resume", ck.to_str().unwrap(), "--lambda", "0.5"]);
    assert_eq!(code, EXIT_FAILURE);
    assert!(!out.join("checkpoint_4.dlck").exists());
}

#[test]
fn invalid_config_reports_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nlamda = 2.0\n").unwrap();
    let out = bin().args(["train", "--config", cfg.to_str().unwrap()]).env("DLAB_RUN_DIR", tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    std::fs::write(&cfg, "[net]\nimage_size = 16\n").unwrap();
    let out = bin().args(["train", "--config", cfg.to_str().unwrap()]).env("DLAB_RUN_DIR", tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.image_size"));
}

#[test]
fn config_file_and_flags_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "checkpoint_interval = 0\n[train]\nsteps = 3\nlambda = 0.25\n[net]\ndim_v = 5\n").unwrap();
    assert_eq!(train(tmp.path(), &["--config", cfg.to_str().unwrap(), "--dim-v", "3"]), EXIT_OK);
    let resolved = RunConfig::from_toml(&String::from_utf8(read(tmp.path().join("config.resolved"))).unwrap()).unwrap();
    assert_eq!((resolved.net.dim_v, resolved.train.lambda, resolved.train.steps), (3, 0.25, 3));
    let ckpts: Vec<PathBuf> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "dlck"))
        .collect();
    assert_eq!(ckpts, vec![tmp.path().join("checkpoint_3.dlck")]);
}

#[test]
fn run_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--steps", "1"];
    args.extend_from_slice(SMALL);
    let st = bin().args(&args).env("DLAB_RUN_DIR", tmp.path()).status().unwrap();
    assert_eq!(st.code(), Some(EXIT_OK));
    assert!(tmp.path().join("checkpoint_1.dlck").exists());
}

#[test]
fn exit_codes() {
    assert_eq!(dlab(&["train", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(dlab(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(dlab(&["transfer-grid", "--checkpoint", "x", "--rows", "0", "--out", "y"]), EXIT_USAGE);
    assert_eq!(dlab(&["eval", "--checkpoint", "/nonexistent/checkpoint.dlck"]), EXIT_FAILURE);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.dlck");
    std::fs::write(&bad, b"DLCK\x02\0\0\0").unwrap();
    let out = bin().args(["eval", "--checkpoint", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

fn trained(dir: &Path) -> PathBuf {
    assert_eq!(train(dir, &["--steps", "4", "--dim-v", "4"]), EXIT_OK);
    dir.join("checkpoint_4.dlck")
}

#[test]
fn eval_is_deterministic_and_untrained_retrieval_is_bounded() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained(&tmp.path().join("run"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(dlab(&["eval", "--checkpoint", ck.to_str().unwrap(), "--n-draws", "32", "--out", d.to_str().unwrap()]), EXIT_OK);
    }
    let json = read(a.join("eval_checkpoint_4.json"));
    assert_eq!(json, read(b.join("eval_checkpoint_4.json")));
    assert_eq!(read(a.join("pca_checkpoint_4.csv")), read(b.join("pca_checkpoint_4.csv")));
    let report: serde_json::Value = serde_json::from_slice(&json).unwrap();

    // An untrained encoder carries no learned viewpoint code, but it is a
    // smooth map of the pixels, so its retrieval lies between random
    // features and raw pixels on the same protocol.
    let cfg = RunConfig::from_toml(&String::from_utf8(read(tmp.path().join("run/config.resolved"))).unwrap()).unwrap();
    let renderer = cfg.renderer(Split::Test).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (factors, labels) = retrieval_set(&renderer, cfg.eval.per_identity, &mut rng);
    let noise: Vec<Vec<f64>> = labels.iter().map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let chance = nn_map(&noise, &labels).unwrap();
    let pixels: Vec<Vec<f64>> = factors.iter().map(|f| renderer.render(*f).unwrap().data().to_vec()).collect();
    let pixel_map = nn_map(&pixels, &labels).unwrap();
    let map_v = report["map_v"].as_f64().unwrap();
    assert!(chance - 0.05 < map_v && map_v < pixel_map + 0.05, "chance {chance} < map_v {map_v} < pixels {pixel_map}");
    assert_eq!(report["common_stat"]["stat_real"].as_f64(), Some(0.0));
    let pca = String::from_utf8(read(a.join("pca_checkpoint_4.csv"))).unwrap();
    assert!(pca.starts_with("sample_id,x,y,v_true,c_true\n"));
}

#[test]
fn eval_sweep_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let ck4 = trained(&tmp.path().join("v4"));
    assert_eq!(train(&tmp.path().join("v2"), &["--steps", "2", "--dim-v", "2"]), EXIT_OK);
    let ck2 = tmp.path().join("v2/checkpoint_2.dlck");
    let out = tmp.path().join("sweep");
    let code = dlab(&["eval", "--checkpoint", ck4.to_str().unwrap(), "--checkpoint", ck2.to_str().unwrap(), "--n-draws", "16", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let csv = String::from_utf8(read(out.join("sweep.csv"))).unwrap();
    let dims: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(dims, ["2", "4"]);
}

#[test]
fn transfer_grid_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained(&tmp.path().join("run"));
    let out = tmp.path().join("grid.pgm");
    let code = dlab(&["transfer-grid", "--checkpoint", ck.to_str().unwrap(), "--rows", "2", "--cols", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let bytes = read(&out);
    let (w, h) = (4 * 16 + 3, 3 * 16 + 2);
    let header = format!("P5\n{w} {h}\n255\n");
    assert!(bytes.starts_with(header.as_bytes()));
    let px = &bytes[header.len()..];
    assert_eq!(px.len(), w * h);
    assert!(px[..16].iter().all(|&b| b == 0), "corner is blank");
    assert_eq!(px[16], 128);
}

#[test]
fn ideal_model_grid_cells_are_renders() {
    let cfg = RunConfig { data: dlab_core::data::DataConfig { image_size: 16, ..Default::default() }, ..RunConfig::default() };
    let renderer = cfg.renderer(Split::Test).unwrap();
    let index = cfg.inverse_index(Split::Test).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vf: Vec<_> = (0..2).map(|_| renderer.sample_factors(&mut rng)).collect();
    let cf: Vec<_> = (0..3).map(|_| renderer.sample_factors(&mut rng)).collect();
    let imgs = |fs: &[dlab_core::data::FactorPair]| fs.iter().map(|f| renderer.render(*f).unwrap()).collect::<Vec<_>>();
    let ideal = IdealTransfer { renderer: &renderer, index: &index };
    let grid = transfer_grid(&ideal, &imgs(&vf), &imgs(&cf)).unwrap();
    for (i, v) in vf.iter().enumerate() {
        for (j, c) in cf.iter().enumerate() {
            let want = renderer.render(dlab_core::data::FactorPair { v: v.v, c: c.c }).unwrap();
            let (x0, y0) = ((j + 1) * 17, (i + 1) * 17);
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(grid.get(x0 + x, y0 + y, 0), to_byte(want.data()[y * 16 + x]));
                }
            }
        }
    }
}

#[test]
fn ambiguity_demo_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["ambiguity-demo", "--mirror", "--out", tmp.path().to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("TV=0") && text.contains("witness=T("), "{text}");
    let json: serde_json::Value = serde_json::from_slice(&read(tmp.path().join("ambiguity.json"))).unwrap();
    let configs = json["configurations"].as_array().unwrap();
    assert_eq!(configs.len(), 10);
    assert!(configs.iter().all(|c| c["tv_distance"] == "0" && !c["witness"].is_null()));
    for m in json["mirror"].as_array().unwrap() {
        assert!(m["p_value"].as_f64().unwrap() > 0.01);
    }
    assert!(json["reference_consistency"].is_null());
}

#[test]
fn ambiguity_demo_with_checkpoint_flags_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = trained(&tmp.path().join("run"));
    let out = tmp.path().join("amb");
    assert_eq!(dlab(&["ambiguity-demo", "--configs", "1", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_OK);
    let json: serde_json::Value = serde_json::from_slice(&read(out.join("ambiguity.json"))).unwrap();
    let classes = json["reference_consistency"]["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 4);
    assert!(classes.iter().all(|c| c["reflected"].is_boolean()));
}

#[test]
fn gradcheck_covers_every_case_and_catches_a_corrupted_gradient() {
    let rows = gradcheck_rows(0, 1e-4, false).unwrap();
    let mut want: Vec<&str> = op_registry(0).iter().map(|c| c.name).collect();
    want.extend(model_cases(0).unwrap().iter().map(|c| c.name));
    assert_eq!(rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), want);
    assert!(rows.iter().all(|r| r.pass), "{rows:?}");
    assert_eq!(dlab(&["gradcheck"]), EXIT_OK);

    let out = bin().args(["gradcheck", "--inject-fault"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_FAILURE));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("corrupted_fixture") && l.ends_with("FAIL")), "{text}");
}
