use std::fs;

use iclora::experiment::{run_experiment, score_artifacts, ExperimentConfig};
use iclora::output::read_set;

fn smoke_run() -> (
    tempfile::TempDir,
    ExperimentConfig,
    iclora::experiment::ExperimentReport,
) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::smoke();
    let report = run_experiment(&cfg, dir.path()).unwrap();
    (dir, cfg, report)
}

#[test]
fn smoke_experiment_end_to_end() {
    let (dir, cfg, report) = smoke_run();
    let ids: Vec<u8> = report.criteria.iter().map(|c| c.id).collect();
    assert_eq!(ids, [5, 6, 7, 8]);
    // the rerun reproduces every artifact
    let det = &report.criteria[3];
    assert!(det.pass, "{}", det.detail);

    // scoring from disk agrees with the run
    let again = score_artifacts(&cfg, dir.path()).unwrap();
    for (a, b) in again.iter().zip(&report.criteria) {
        assert_eq!((a.id, a.pass, &a.detail), (b.id, b.pass, &b.detail));
    }
    let on_disk: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk["criteria"].as_array().unwrap().len(), 4);

    // unmasked panels of every inpainted set match the reference bytes
    let mask = cfg.mask().unwrap();
    for kind in ["palette", "identity"] {
        let refs = dir.path().join("inpaint").join(kind).join("refs");
        let outs = dir.path().join("inpaint").join(kind).join("out");
        let mut n = 0;
        for e in fs::read_dir(&refs).unwrap() {
            let name = e.unwrap().file_name();
            let (layout, _, _) = read_set(&refs.join(&name)).unwrap();
            for m in layout.markers() {
                if mask.masked().contains(m) {
                    continue;
                }
                let f = format!("panel_{}.png", m.as_str());
                assert_eq!(
                    fs::read(refs.join(&name).join(&f)).unwrap(),
                    fs::read(outs.join(&name).join(&f)).unwrap()
                );
            }
            n += 1;
        }
        assert_eq!(n, cfg.eval_sets);
    }
}

#[test]
fn finished_stages_are_reused_and_configs_are_guarded() {
    let (dir, cfg, first) = smoke_run();
    let ckpt = dir.path().join("base.ckpt");
    let before = fs::metadata(&ckpt).unwrap().modified().unwrap();
    let second = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
    for (a, b) in first.criteria.iter().zip(&second.criteria) {
        assert_eq!((a.pass, &a.detail), (b.pass, &b.detail));
    }
    let other = ExperimentConfig {
        seed: cfg.seed + 1,
        ..cfg
    };
    assert!(run_experiment(&other, dir.path()).is_err());
}
