use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idsplit::corpus::read_dataset;

fn idsplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idsplit"))
        .args(args)
        .env("IDSPLIT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = idsplit(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const WORDS: [&str; 10] = [
    "get", "set", "file", "name", "path", "node", "count", "user", "list", "value",
];

/// A Python file whose identifiers combine `WORDS` in every convention.
fn write_project(dir: &Path) -> PathBuf {
    let mut src = String::new();
    for (i, a) in WORDS.iter().enumerate() {
        for (j, b) in WORDS.iter().enumerate() {
            if i == j {
                continue;
            }
            let upper = format!("{}{}", b[..1].to_uppercase(), &b[1..]);
            match (i + j) % 3 {
                0 => src.push_str(&format!("{a}_{b} = 1\n")),
                1 => src.push_str(&format!("def {a}{upper}(): pass\n")),
                _ => src.push_str(&format!("{}_{} = 2\n", a.to_uppercase(), b.to_uppercase())),
            }
        }
    }
    let path = dir.join("project");
    std::fs::create_dir_all(&path).unwrap();
    std::fs::write(path.join("main.py"), src).unwrap();
    path
}

#[test]
fn extract_single_identifier() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir(&src).unwrap();
    std::fs::write(src.join("a.c"), "int fooBar;").unwrap();
    let out = dir.path().join("data.tsv");
    let report = ok(&["extract", s(&src), "-o", s(&out)]);
    assert!(report.contains("records\t1"), "{report}");
    let data = read_dataset(&out).unwrap();
    assert_eq!(data.len(), 1);
    assert_eq!(data.records()[0].merged(), "foobar");
    assert_eq!(data.records()[0].boundaries().iter().copied().collect::<Vec<_>>(), [3]);
}

#[test]
fn extract_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let project = write_project(dir.path());
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    ok(&["extract", s(&project), "-o", s(&a), "--seed", "3"]);
    ok(&["extract", s(&project), "-o", s(&b), "--seed", "3"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn extract_from_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = idsplit(&["extract", s(&empty), "-o", s(&dir.path().join("d.tsv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no identifiers"));
    assert!(!dir.path().join("d.tsv").exists());
}

#[test]
fn train_split_and_evaluate_every_family() {
    let dir = tempfile::tempdir().unwrap();
    let project = write_project(dir.path());
    let data = dir.path().join("data.tsv");
    ok(&["extract", s(&project), "-o", s(&data)]);

    let models = [
        ("lm-and", vec![]),
        ("lm-or", vec![]),
        ("dp-posterior", vec![]),
        ("dp-zipf", vec![]),
        ("bilstm", vec!["--hidden", "8", "--epochs", "2", "--batch-size", "16"]),
        ("bigru", vec!["--hidden", "8", "--epochs", "2", "--batch-size", "16"]),
    ];
    let mut paths = Vec::new();
    for (kind, extra) in &models {
        let path = dir.path().join(format!("{kind}.bin"));
        let mut args = vec!["train", s(&data), "--model", kind, "-o", s(&path)];
        args.extend(extra);
        ok(&args);
        let split = ok(&["split", "--model", s(&path), "getFileName"]);
        assert_eq!(split.lines().count(), 1, "{kind}: {split}");
        assert!(split.starts_with("get "), "{kind}: {split}");
        paths.push(path);
    }

    let dp = ok(&["split", "--model", s(&paths[2]), "filename", "usercount"]);
    assert_eq!(dp, "file name\nuser count\n");

    let plot = dir.path().join("plot.tsv");
    let mut args = vec!["evaluate", "heuristic"];
    args.extend(paths.iter().map(|p| s(p)));
    args.extend(["--dataset", s(&data), "--tsv", "--emit-plot", s(&plot)]);
    let table = ok(&args);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("model\tprecision\trecall\tf1\ttp\tfp\tfn\trecords"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 7);
    let heuristic = rows.iter().find(|r| r[0] == "heuristic").unwrap();
    assert_eq!(heuristic[3], "1");
    let plot = std::fs::read_to_string(&plot).unwrap();
    assert!(plot.starts_with("kind\tlabel\tprecision\trecall\n"));
    assert!(plot.contains("iso\tf1=0.9\t"));
}

#[test]
fn loading_the_wrong_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.bin");
    std::fs::write(&bogus, b"not a model").unwrap();
    let out = idsplit(&["split", "--model", s(&bogus), "fooBar"]);
    assert_eq!(out.status.code(), Some(2));
    let out = idsplit(&["train", s(&bogus), "--model", "lm-and", "-o", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn split_reads_standard_input() {
    use std::io::Write;
    use std::process::Stdio;
    let mut child = Command::new(env!("CARGO_BIN_EXE_idsplit"))
        .args(["split", "--heuristic-only"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"XGMAC_TX_SENDAPPGOODPKTS\nnamehash_from_uid\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "xgmac tx sendappgoodpkts\nnamehash from uid\n"
    );
}
