use std::path::Path;

use subaudit::cohort::{load_cohort, read_feature_matrix, write_cohort, FMAT_MAGIC};

/// Feature file assembled byte by byte: magic, version 1, rows, cols, f32 LE.
fn fmat_bytes(rows: &[Vec<f32>], n_cols: usize) -> Vec<u8> {
    let mut b = FMAT_MAGIC.to_vec();
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    b.extend_from_slice(&(n_cols as u64).to_le_bytes());
    for r in rows {
        for v in r {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

fn exported_rows(n_cols: usize) -> Vec<Vec<f32>> {
    let row = |k: usize| {
        (0..n_cols)
            .map(|j| ((k * 31 + j) % 97) as f32 / 7.0 - 3.0)
            .collect::<Vec<f32>>()
    };
    // Third scan is the first image listed again.
    vec![row(0), row(1), row(0)]
}

const TABLE: &str = "\
subject_id,scan_id,sex,race,age,label_no_finding,label_pleural_effusion,logit_no_finding,logit_pleural_effusion,feature_row
p1,s1,Female,White,61.5,1,0,1.25,-2.0
p2,s2,Male,Black,47,0,1,-0.5,0.75
p1,s3,Female,White,62,0,0,-1.5,-1.0
";

fn table_with_rows(rows: [usize; 3]) -> String {
    let mut lines = TABLE.lines();
    let mut out = format!("{}\n", lines.next().unwrap());
    for (line, r) in lines.zip(rows) {
        out.push_str(&format!("{line},{r}\n"));
    }
    out
}

fn export(dir: &Path, n_cols: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let table = dir.join("cohort.csv");
    let features = dir.join("features.fmat");
    std::fs::write(&table, table_with_rows([0, 1, 2])).unwrap();
    std::fs::write(&features, fmat_bytes(&exported_rows(n_cols), n_cols)).unwrap();
    (table, features)
}

fn loads_cleanly(n_cols: usize) {
    let dir = tempfile::tempdir().unwrap();
    let (table, features) = export(dir.path(), n_cols);
    let cohort = load_cohort(&table, Some(&features)).unwrap();
    let fm = cohort.features().unwrap();
    assert_eq!((fm.n_rows(), fm.n_cols()), (3, n_cols));
    let want = exported_rows(n_cols);
    for (i, r) in want.iter().enumerate() {
        assert!(fm.row(i).iter().zip(r).all(|(a, b)| *a == f64::from(*b)));
    }
    assert_eq!(fm.row(0), fm.row(2));
    assert_eq!(cohort.records()[1].feature_ref, Some(1));
}

#[test]
fn densenet_width_features_load() {
    loads_cleanly(1024);
}

#[test]
fn resnet_width_features_load() {
    loads_cleanly(512);
}

#[test]
fn header_reports_declared_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let (_, features) = export(dir.path(), 1024);
    let bytes = std::fs::read(&features).unwrap();
    assert_eq!(&bytes[..14], b"SUBAUDIT-FMAT\0");
    assert_eq!(u64::from_le_bytes(bytes[18..26].try_into().unwrap()), 3);
    assert_eq!(u64::from_le_bytes(bytes[26..34].try_into().unwrap()), 1024);
    assert_eq!(bytes.len(), 34 + 3 * 1024 * 4);
}

#[test]
fn round_trip_preserves_table_and_features() {
    let dir = tempfile::tempdir().unwrap();
    let (table, features) = export(dir.path(), 512);
    let cohort = load_cohort(&table, Some(&features)).unwrap();
    let (t2, f2) = (dir.path().join("again.csv"), dir.path().join("again.fmat"));
    write_cohort(&cohort, &t2, Some(&f2)).unwrap();
    let back = load_cohort(&t2, Some(&f2)).unwrap();
    assert_eq!(back.records(), cohort.records());
    assert_eq!(back.features().unwrap(), cohort.features().unwrap());
    assert_eq!(
        std::fs::read(&features).unwrap(),
        std::fs::read(&f2).unwrap()
    );
}

#[test]
fn truncated_or_mislabelled_features_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (table, features) = export(dir.path(), 512);
    let mut bytes = std::fs::read(&features).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&features, &bytes).unwrap();
    assert!(read_feature_matrix(&features).is_err());
    assert!(load_cohort(&table, Some(&features)).is_err());

    let mut bytes = fmat_bytes(&exported_rows(512), 512);
    bytes[14] = 2;
    std::fs::write(&features, &bytes).unwrap();
    assert!(read_feature_matrix(&features).is_err());
}

#[test]
fn feature_row_out_of_range_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (table, features) = export(dir.path(), 512);
    std::fs::write(&table, table_with_rows([0, 1, 3])).unwrap();
    assert!(load_cohort(&table, Some(&features)).is_err());
}

#[test]
fn table_without_features_loads() {
    let dir = tempfile::tempdir().unwrap();
    let (table, _) = export(dir.path(), 512);
    let cohort = load_cohort(&table, None).unwrap();
    assert_eq!(cohort.len(), 3);
    assert!(cohort.features().is_none());
    assert_eq!(cohort.records()[0].logit("no_finding"), Some(1.25));
}
