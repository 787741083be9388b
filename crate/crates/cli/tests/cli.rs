use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/mini")
}

fn peb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peb"))
        .args(args)
        .env_remove("PEB_BACKEND_URL")
        .env_remove("PEB_CACHE_DIR")
        .env_remove("PEB_DATA_DIR")
        .output()
        .expect("run peb")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn eval_markdown_on_mock() {
    let data = mini();
    let o = peb(&[
        "eval",
        "--backend",
        "mock:3",
        "--data",
        data.to_str().unwrap(),
        "--benchmarks",
        "stsb-test",
        "--templates",
        "prompt_eol,pretended_cot",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("- aggregation: all"));
    assert!(out.contains("- config digest: "));
    assert!(out.contains("| PromptEOL | -1 | last_token | no |"), "{out}");
    assert!(out.contains("| Pretended CoT | -2 | last_token | no |"), "{out}");
}

#[test]
fn environment_supplies_backend_and_data() {
    let o = Command::new(env!("CARGO_BIN_EXE_peb"))
        .args(["eval", "--benchmarks", "stsb-test", "--format", "csv"])
        .env("PEB_BACKEND_URL", "mock:3")
        .env("PEB_DATA_DIR", mini())
        .env_remove("PEB_CACHE_DIR")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o)
        .starts_with("template,layer,rule,normalize,aggregation,benchmark,status,n,spearman_x100,pearson_x100\n"));
}

#[test]
fn unknown_template_is_a_config_error() {
    let data = mini();
    let o = peb(&[
        "eval",
        "--backend",
        "mock",
        "--data",
        data.to_str().unwrap(),
        "--templates",
        "nope",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown template"));
}

#[test]
fn missing_backend_is_a_config_error() {
    let data = mini();
    let o = peb(&["eval", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreachable_sidecar_is_a_backend_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let data = mini();
    let url = format!("http://127.0.0.1:{port}");
    let o = Command::new(env!("CARGO_BIN_EXE_peb"))
        .args(["eval", "--backend", &url, "--data", data.to_str().unwrap()])
        .env("PEB_BACKEND_TIMEOUT_SECS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_benchmarks_are_a_data_error_with_partial_report() {
    let data = mini();
    let o = peb(&[
        "eval",
        "--backend",
        "mock",
        "--data",
        data.to_str().unwrap(),
        "--benchmarks",
        "sts12,stsb-test",
    ]);
    assert_eq!(o.status.code(), Some(4));
    let out = stdout(&o);
    assert!(out.contains("| n/a |"), "{out}");
    assert!(out.contains("prompt_eol on STS12: data error"), "{out}");
}

#[test]
fn threshold_out_of_range_is_a_config_error() {
    let data = mini();
    let o = peb(&[
        "metrics",
        "align-uniform",
        "--backend",
        "mock",
        "--data",
        data.to_str().unwrap(),
        "--benchmarks",
        "stsb-test",
        "--threshold",
        "5.1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("5.1"));
}

#[test]
fn align_uniform_json() {
    let data = mini();
    let o = peb(&[
        "metrics",
        "align-uniform",
        "--backend",
        "mock:2",
        "--data",
        data.to_str().unwrap(),
        "--benchmarks",
        "stsb-test",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["threshold"], 4.5);
    assert_eq!(v["normalized"], true);
    assert_eq!(v["rows"][0]["sentences"], 100);
}

#[test]
fn sweep_grid_and_causal_refusal() {
    let data = mini();
    let o = peb(&[
        "sweep-mask",
        "--backend",
        "mock:2",
        "--data",
        data.to_str().unwrap(),
        "--counts",
        "1..4",
        "--eos",
        "period,bang,question",
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 13);
    assert!(out.lines().nth(1).unwrap().starts_with("mask1_period,1,.,"));

    let o = peb(&[
        "sweep-mask",
        "--backend",
        "mock",
        "--mock-causal",
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no mask token"));
}

#[test]
fn analyze_csv() {
    let o = peb(&[
        "analyze",
        "--backend",
        "mock:4",
        "--sentence",
        "A man is driving a car.",
        "--core",
        "man,driving,car",
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("token,start,end,similarity,proportion,class"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 7);
    assert!(
        rows[1].starts_with("man,2,5,") && rows[1].ends_with(",core"),
        "{}",
        rows[1]
    );
    assert!(rows[0].ends_with(",modifier"));
}

#[test]
fn analyze_unknown_template() {
    let o = peb(&["analyze", "--backend", "mock", "--sentence", "x", "--template", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cache_stats_and_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let data = mini();
    let o = peb(&[
        "eval",
        "--backend",
        "mock",
        "--data",
        data.to_str().unwrap(),
        "--benchmarks",
        "stsb-test",
        "--cache",
        cache.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = peb(&["cache", "stats", "--cache", cache.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    // The mini benchmark has 100 distinct sentences.
    assert!(stdout(&o).contains("records: 100"), "{}", stdout(&o));

    let o = peb(&["cache", "verify", "--cache", cache.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));

    let log = cache.join("records.log");
    let len = fs::metadata(&log).unwrap().len();
    fs::OpenOptions::new()
        .write(true)
        .open(&log)
        .unwrap()
        .set_len(len - 3)
        .unwrap();
    let o = peb(&["cache", "verify", "--cache", cache.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stdout(&o));
    assert!(stdout(&o).contains("truncated tail bytes"));

    let o = peb(&[
        "cache",
        "stats",
        "--cache",
        tmp.path().join("nothing").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn import_senteval_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("senteval");
    let dst = tmp.path().join("normalized");
    let stsb = src.join("STS/STSBenchmark");
    fs::create_dir_all(&stsb).unwrap();
    fs::write(
        stsb.join("sts-test.csv"),
        "main-captions\tMSRvid\t2012test\t0001\t5.000\tA plane is taking off.\tAn air plane is taking off.\n\
         main-captions\tMSRvid\t2012test\t0004\t\tNo score.\tStill no score.\n\
         main-captions\tMSRvid\t2012test\t0005\t2.500\tA man plays.\tA woman sings.\n",
    )
    .unwrap();
    let o = peb(&["import", "--src", src.to_str().unwrap(), "--dst", dst.to_str().unwrap()]);
    // Other benchmarks are absent, so the import is partial.
    assert_eq!(o.status.code(), Some(4));
    assert!(
        stdout(&o).contains("STSB-test: 2 pairs imported, 1 dropped"),
        "{}",
        stdout(&o)
    );
    let written = fs::read_to_string(dst.join("STSB-test/test.tsv")).unwrap();
    assert_eq!(written.lines().count(), 2);

    let o = peb(&[
        "eval",
        "--backend",
        "mock",
        "--data",
        dst.to_str().unwrap(),
        "--benchmarks",
        "stsb-test",
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn template_file_adds_templates() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("extra.toml");
    fs::write(
        &file,
        "[[template]]\nid = \"short_eol\"\nfamily = \"generative\"\ncapture = \"last\"\npattern = '\"[X]\" in one word:\"'\n",
    )
    .unwrap();
    let o = peb(&["templates", "--template-file", file.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(
        out.contains("short_eol\tgenerative\tlast\t\"[X]\" in one word:\""),
        "{out}"
    );
    assert!(out.contains("prompt_eol\tgenerative\tlast\t"));
}

#[test]
fn mask_counts_beyond_four_are_flagged() {
    let data = mini();
    let o = peb(&[
        "eval",
        "--backend",
        "mock",
        "--data",
        data.to_str().unwrap(),
        "--benchmarks",
        "stsb-test",
        "--templates",
        "mask6_period",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mask6_period: mask count outside the 1-4 sweep"));
}
