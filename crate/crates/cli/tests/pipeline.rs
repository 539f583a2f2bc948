use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use objprune_cli::commands::parse_report;

const TINY: &str = r#"
[data]
train = 40
val = 12
test = 12

[scene]
id_dim = 16
sem3d_dim = 4
sem2d_dim = 4
n_min = 4
n_max = 12

[gap]
hidden_dim = 16
num_heads = 2
encoder_layers = 1
decoder_layers = 1
ffn_dim = 24
sem3d_dim = 4
sem2d_dim = 4
epochs = 2
batch_size = 8
"#;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{TINY}\n{extra}")).unwrap();
    (dir, cfg)
}

fn run(cfg: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["objprune".to_string(), "--config".into(), cfg.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    objprune_cli::run(argv)
}

fn run_all(cfg: &Path) {
    for stage in ["gen", "extract", "train", "search", "eval", "report"] {
        assert_eq!(run(cfg, &[stage]), 0, "stage {stage}");
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn csv_body(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap();
    text.split_once('\n').unwrap().1.to_string()
}

#[test]
fn reruns_are_byte_identical() {
    let (a, cfg_a) = setup("");
    let (b, cfg_b) = setup("");
    run_all(&cfg_a);
    run_all(&cfg_b);
    let (ta, tb) = (tree(&a.path().join("run")), tree(&b.path().join("run")));
    assert!(ta.len() >= 12, "{:?}", ta.keys().collect::<Vec<_>>());
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs", k.display());
    }
}

#[test]
fn bad_config_exits_with_2() {
    let (_d, cfg) = setup("");
    assert_eq!(run(&cfg, &["--set", "gap.epochs=many", "gen"]), 2);
    assert_eq!(run(&cfg, &["--set", "scene.n_min=0", "gen"]), 2);
    assert_eq!(run(&cfg, &["--set", "gap", "gen"]), 2);
}

#[test]
fn missing_upstream_exits_with_3() {
    let (_d, cfg) = setup("");
    assert_eq!(run(&cfg, &["train"]), 3);
    assert_eq!(run(&cfg, &["report"]), 3);
}

#[test]
fn changed_upstream_config_is_a_hash_mismatch() {
    let (_d, cfg) = setup("");
    assert_eq!(run(&cfg, &["gen"]), 0);
    assert_eq!(run(&cfg, &["extract"]), 0);
    assert_eq!(run(&cfg, &["--set", "teacher.gain=5.0", "train"]), 2);
    assert_eq!(run(&cfg, &["--set", "seeds.data=8", "extract"]), 2);
}

#[test]
fn gen_manifest_records_count_and_seed() {
    let (d, cfg) = setup("");
    let code = run(
        &cfg,
        &["--set", "data.train=100", "--set", "data.val=0", "--set", "data.test=0", "gen"],
    );
    assert_eq!(code, 0);
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(d.path().join("run/dataset/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["count"], 100);
    assert_eq!(m["seed"], 7);
    let lines = fs::read_to_string(d.path().join("run/dataset/train.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 100);
}

#[test]
fn noise_free_audit_is_rank_exact() {
    let (d, cfg) = setup("[teacher]\nnoise_sigma = 0.0\n");
    assert_eq!(run(&cfg, &["gen"]), 0);
    assert_eq!(run(&cfg, &["extract", "--dump-stacks", "2"]), 0);
    let body = csv_body(&d.path().join("run/oracles/audit.csv"));
    let rows: Vec<&str> = body.lines().skip(1).collect();
    assert_eq!(rows.len(), 64);
    for r in rows {
        let rho: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(rho, 1.0, "{r}");
    }
    assert!(d.path().join("run/oracles/stacks/train_00001.bin").exists());
    let stack = objprune::AttentionStack::read_binary(&d.path().join("run/oracles/stacks/train_00000.json")).unwrap();
    assert_eq!(stack.layers(), 4);
}

#[test]
fn empty_dataset_is_rejected_by_extract() {
    let (_d, cfg) = setup("");
    let zero = ["--set", "data.train=0", "--set", "data.val=0", "--set", "data.test=0"];
    let mut gen = zero.to_vec();
    gen.push("gen");
    assert_eq!(run(&cfg, &gen), 0);
    let mut ext = zero.to_vec();
    ext.push("extract");
    assert_eq!(run(&cfg, &ext), 1);
}

#[test]
fn keep_everything_point_has_no_reduction() {
    let (d, cfg) = setup("[eval]\npoints = [{ drop_layer = 32, ratio = 0.0 }]\n");
    run_all(&cfg);
    let table = parse_report(&csv_body(&d.path().join("run/reports/eval.csv"))).unwrap();
    let unpruned = table[&("0.0000".to_string(), "unpruned".to_string())]["accuracy"];
    let mut arms = 0;
    for ((budget, method), m) in &table {
        assert_eq!(budget, "0.0000");
        assert_eq!(m["flops_reduction"], 0.0, "{method}");
        assert_eq!(m["accuracy"], unpruned, "{method}");
        arms += 1;
    }
    assert_eq!(arms, 5);
    assert!(d.path().join("run/reports/summary.md").exists());
}

#[test]
fn random_pruning_trails_oracle_at_high_ratio() {
    let (d, cfg) = setup("[eval]\npoints = [{ drop_layer = 2, ratio = 0.95 }]\n");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("test = 12", "test = 60")).unwrap();
    run_all(&cfg);
    let table = parse_report(&csv_body(&d.path().join("run/reports/eval.csv"))).unwrap();
    let acc = |m: &str| table[&("0.8906".to_string(), m.to_string())]["accuracy"];
    assert!(acc("oracle_fixed") > acc("random_fixed"), "{table:?}");
    let red = table[&("0.8906".to_string(), "gap_fixed".to_string())]["flops_reduction"];
    assert!(red > 0.8, "{red}");
}
