use std::path::PathBuf;

use vlight::config::RunConfig;
use vlight::dataset::DatasetKind;
use vlight::inference::Binarization;
use vlight::nets::Family;

fn shipped() -> Vec<(String, RunConfig)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut out: Vec<(String, RunConfig)> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| {
            let cfg = RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (p.file_stem().unwrap().to_string_lossy().into_owned(), cfg)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn every_shipped_config_validates() {
    let all = shipped();
    assert!(all.len() >= 17);
    for (name, cfg) in &all {
        let expected = if name.starts_with("table1") || name.starts_with("table2_unet") {
            Family::Unet
        } else if name.starts_with("table2_sb") {
            Family::SimpleBaseline
        } else {
            Family::Vlight
        };
        assert_eq!(cfg.model.family, expected, "{name}");
    }
}

#[test]
fn reference_targets() {
    let all = shipped();
    let get = |n: &str| &all.iter().find(|(name, _)| name == n).unwrap().1;
    let drive = get("drive_vlight");
    assert_eq!(drive.inference.scales, vec![2.0, 3.0, 4.0]);
    assert_eq!(drive.train.samples_total, 100_000);
    let hrf = get("hrf_vlight");
    assert_eq!(hrf.dataset.kind, DatasetKind::Hrf);
    assert_eq!(hrf.inference.binarization, Binarization::Otsu);
    assert_eq!(hrf.inference.scales, vec![1.0]);
    assert_eq!(get("chase_vlight").dataset.kind, DatasetKind::ChaseDb1);
    assert_eq!(get("drive_vlight_smoke").train.samples_total, 20_000);
    assert_eq!(get("table2_vlight").model, drive.model);
}
