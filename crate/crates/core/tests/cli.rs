//! End-to-end runs of the `grow` binary.

use std::process::Command;

fn grow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_grow"))
}

const CONFIG: &str = "[run]\nid = \"cli\"\nseed = 4\n[data]\nspec = \"blobs:n=200,classes=2,seed=1\"\n\
[model]\nhidden = [1]\nloss = \"cross_entropy\"\n[growth]\nmax_additions = 2\n";

#[test]
fn run_then_inspect_then_propose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let st = grow().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let log = std::fs::read_to_string(out.join("cli.csv")).unwrap();
    assert!(log.starts_with("run_id,wall_step,epoch,event"));
    assert!(log.lines().any(|l| l.contains(",grow,")));

    let ckpt = out.join("cli.ckpt");
    let st = grow().arg("inspect").arg("--checkpoint").arg(&ckpt).args(["--data", "blobs:n=200,classes=2,seed=1"]).output().unwrap();
    assert!(st.status.success());
    let text = String::from_utf8(st.stdout).unwrap();
    assert!(text.contains("site 0: psi"), "{text}");

    for method in ["tiny", "gradmax", "random"] {
        let st = grow()
            .arg("propose")
            .arg("--checkpoint")
            .arg(&ckpt)
            .args(["--data", "blobs:n=200,classes=2,seed=1", "--layer", "0", "--method", method])
            .output()
            .unwrap();
        assert!(st.status.success(), "{method}: {}", String::from_utf8_lossy(&st.stderr));
        assert!(String::from_utf8(st.stdout).unwrap().starts_with(method));
    }
}

#[test]
fn same_seed_runs_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let mut logs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        assert!(grow().args(["run", "--seed", "9", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap().success());
        logs.push(std::fs::read(out.join("cli.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn exit_codes() {
    let code = |args: &[&str]| grow().args(args).output().unwrap().status.code();
    assert_eq!(code(&["nonsense"]), Some(1));
    assert_eq!(code(&["inspect", "--checkpoint", "/definitely/missing.ckpt"]), Some(2));
    assert_eq!(code(&["verify", "--filter", "no_such_check"]), Some(1));
    assert_eq!(code(&["verify", "--filter", "trace_inequality"]), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[data]\nspec = \"blobs\"\n[model]\nhidden = []\n").unwrap();
    assert_eq!(code(&["run", "--config", bad.to_str().unwrap()]), Some(1));
    let garbage = dir.path().join("x.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&["inspect", "--checkpoint", garbage.to_str().unwrap()]), Some(2));
    let missing_data = dir.path().join("m.toml");
    std::fs::write(&missing_data, "[data]\nspec = \"idx:images=/nope/a,labels=/nope/b\"\n").unwrap();
    assert_eq!(code(&["run", "--config", missing_data.to_str().unwrap()]), Some(2));
}

#[test]
fn verify_writes_csv_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let st = grow().args(["verify", "--filter", "pinv", "--csv"]).arg(&csv).output().unwrap();
    assert!(st.status.success());
    assert!(String::from_utf8(st.stdout).unwrap().starts_with("PASS pinv_penrose"));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert!(body.starts_with("name,criterion,status,measured,bound,tolerance,notes"));
}
