use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn iclora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iclora"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = iclora(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    v.sort();
    v
}

const TINY: &str = r#"{"model": {"patch": 8, "d_model": 16, "heads": 2, "blocks": 1}, "steps": 3, "batch": 2}"#;
const PROMPT: &str = r#"{"overall": {"TASK": "palette", "COLOR": "green"}, "panels": []}"#;

/// Dataset, tiny base and prompt file in one temp dir.
fn fixture() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-data",
        "--task",
        "palette",
        "--sets",
        "6",
        "--seed",
        "1",
        "--out",
        s(&data),
    ]);
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let base = dir.path().join("base.ckpt");
    ok(&["train-base", "--config", s(&cfg), "--data", s(&data), "--out", s(&base)]);
    let prompt = dir.path().join("prompt.json");
    fs::write(&prompt, PROMPT).unwrap();
    (dir, base, prompt)
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(
        iclora(&["gen-data", "--task", "nope", "--sets", "1", "--out", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(iclora(&["generate", "--out", out]).status.code(), Some(2));
    assert_eq!(iclora(&["frobnicate"]).status.code(), Some(2));
    let bad_layout = iclora(&[
        "gen-data", "--task", "palette", "--sets", "1", "--layout", "9x9", "--out", out,
    ]);
    assert_eq!(bad_layout.status.code(), Some(2));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&[
            "gen-data",
            "--task",
            "palette",
            "--sets",
            "5",
            "--seed",
            "9",
            "--out",
            s(d),
        ]);
    }
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.jsonl")).unwrap());
    let (pa, pb) = (pngs(&a.join("panels")), pngs(&b.join("panels")));
    assert_eq!(pa.len(), 20);
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let run = json(&a.join("run.json"));
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["seed"], 9);
}

#[test]
fn training_commands_write_checkpoints_logs_and_manifests() {
    let (dir, base, _) = fixture();
    assert!(base.is_file());
    assert!(dir.path().join("base.ckpt.log.jsonl").is_file());
    let run = json(&dir.path().join("base.ckpt.run.json"));
    assert_eq!(run["config"]["steps"], 3);
    assert_eq!(run["config"]["model"]["d_model"], 16);

    // flags beat the config file
    let data = dir.path().join("data");
    let lora = dir.path().join("a.lora");
    let cfg = dir.path().join("tiny.json");
    ok(&[
        "train-lora",
        "--config",
        s(&cfg),
        "--base",
        s(&base),
        "--data",
        s(&data),
        "--out",
        s(&lora),
        "--steps",
        "2",
        "--rank",
        "2",
    ]);
    let run = json(&dir.path().join("a.lora.run.json"));
    assert_eq!(run["config"]["steps"], 2);
    assert_eq!(run["config"]["lora"]["rank"], 2);
    assert!(run["inputs"]
        .as_object()
        .unwrap()
        .keys()
        .any(|k| k.ends_with("base.ckpt")));

    let missing = iclora(&["train-lora", "--data", s(&data), "--out", s(&lora)]);
    assert_eq!(missing.status.code(), Some(2));
    let no_data = iclora(&[
        "train-base",
        "--config",
        s(&cfg),
        "--data",
        "/no/such/dir",
        "--out",
        s(&lora),
    ]);
    assert_eq!(no_data.status.code(), Some(1));
}

#[test]
fn generate_and_inpaint() {
    let (dir, base, prompt) = fixture();
    let gen = |seed: &str, out: &Path| {
        ok(&[
            "generate",
            "--base",
            s(&base),
            "--prompt",
            s(&prompt),
            "--seed",
            seed,
            "--steps",
            "3",
            "--out",
            s(out),
        ]);
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    gen("5", &a);
    gen("5", &b);
    gen("6", &c);
    let files = pngs(&a);
    assert_eq!(files.len(), 5, "canvas plus four panels");
    assert!(a.join("set.json").is_file() && a.join("run.json").is_file());
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(name)).unwrap());
    }
    assert_ne!(
        fs::read(a.join("canvas.png")).unwrap(),
        fs::read(c.join("canvas.png")).unwrap()
    );

    let inpaint = |mask: &str, strength: &str, out: &Path| {
        ok(&[
            "inpaint",
            "--base",
            s(&base),
            "--prompt",
            s(&prompt),
            "--seed",
            "5",
            "--steps",
            "3",
            "--reference",
            s(&c.join("canvas.png")),
            "--mask",
            mask,
            "--strength",
            strength,
            "--out",
            s(out),
        ]);
    };
    // nothing noised: the reference comes back
    let zero = dir.path().join("zero");
    inpaint("TL,BR", "0", &zero);
    assert_eq!(
        fs::read(zero.join("canvas.png")).unwrap(),
        fs::read(c.join("canvas.png")).unwrap()
    );
    // unmasked panels keep their bytes
    let part = dir.path().join("part");
    inpaint("TOP-RIGHT,BOTTOM-RIGHT", "1", &part);
    for m in ["TOP-LEFT", "BOTTOM-LEFT"] {
        let f = format!("panel_{m}.png");
        assert_eq!(fs::read(part.join(&f)).unwrap(), fs::read(c.join(&f)).unwrap());
    }
    assert_ne!(
        fs::read(part.join("panel_TOP-RIGHT.png")).unwrap(),
        fs::read(c.join("panel_TOP-RIGHT.png")).unwrap()
    );
    // everything masked at full strength is plain generation
    let all = dir.path().join("all");
    inpaint("TL,TR,BL,BR", "1", &all);
    assert_eq!(
        fs::read(all.join("canvas.png")).unwrap(),
        fs::read(a.join("canvas.png")).unwrap()
    );

    let bad = iclora(&[
        "inpaint",
        "--base",
        s(&base),
        "--reference",
        s(&c.join("canvas.png")),
        "--mask",
        "TL",
        "--strength",
        "1.5",
        "--out",
        s(&all),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_scores_ground_truth_and_shuffled_sets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen-data",
        "--task",
        "palette",
        "--sets",
        "16",
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    let report = dir.path().join("gt.json");
    ok(&["eval", "--task", "palette", "--dir", s(&data), "--report", s(&report)]);
    let r = json(&report);
    assert_eq!(r["rate"], 1.0);
    assert_eq!(r["count"], 16);

    // panel k of set i comes from set i + k: colors no longer agree
    let text = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let mut lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let panels: Vec<Vec<Value>> = lines.iter().map(|l| l["panels"].as_array().unwrap().clone()).collect();
    let n = lines.len();
    for (i, l) in lines.iter_mut().enumerate() {
        for k in 0..4 {
            l["panels"][k] = panels[(i + k) % n][k].clone();
        }
    }
    let mixed: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    fs::write(data.join("manifest.jsonl"), mixed.join("\n") + "\n").unwrap();
    ok(&["eval", "--task", "palette", "--dir", s(&data), "--report", s(&report)]);
    let rate = json(&report)["rate"].as_f64().unwrap();
    assert!(rate <= 0.25, "shuffled sets scored {rate}");

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = iclora(&["eval", "--task", "palette", "--dir", s(&empty), "--report", s(&report)]);
    assert!(!out.status.success());
    assert_eq!(
        iclora(&["eval", "--task", "mixed", "--dir", s(&data), "--report", s(&report)])
            .status
            .code(),
        Some(2)
    );
}
