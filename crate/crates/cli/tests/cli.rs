use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn hpcctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpcctl"))
        .args(args)
        .env_clear()
        .env("USER", "alice")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_listing() {
    let o = hpcctl(&["validate", p(&fixture("listing1.toml"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "ok\n");
    let o = hpcctl(&["validate", "--json", p(&fixture("listing1.toml"))]);
    assert_eq!(stdout(&o), "{\"errors\":[],\"warnings\":[]}\n");
}

#[test]
fn validate_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let dup = write(
        tmp.path(),
        "dup.toml",
        "image = \"a:1\"\nmounts = [\"/x:/data\", \"/y:/data\"]\n",
    );
    let o = hpcctl(&["validate", p(&dup)]);
    assert_eq!(code(&o), 2);
    assert!(
        stdout(&o).contains("duplicate mount destination `/data`"),
        "{}",
        stdout(&o)
    );

    let bad = write(tmp.path(), "bad.toml", "image = \n");
    let o = hpcctl(&["validate", p(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("syntax error"), "{}", stderr(&o));

    let o = hpcctl(&["validate", p(&tmp.path().join("absent.toml"))]);
    assert_eq!(code(&o), 1);

    let undefined = write(
        tmp.path(),
        "u.toml",
        "image = \"a:1\"\nworkdir = \"$NOPE\"\n",
    );
    let o = hpcctl(&["validate", p(&undefined)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("NOPE"));
}

#[test]
fn render_uses_site_file_and_environment() {
    let tmp = TempDir::new().unwrap();
    let site = write(tmp.path(), "site.toml", "shared_store = \"/srv/ro\"\n");
    let o = Command::new(env!("CARGO_BIN_EXE_hpcctl"))
        .args([
            "render",
            "--job",
            "7",
            "--step",
            "2",
            p(&fixture("listing1.toml")),
        ])
        .env_clear()
        .env("USER", "bob")
        .env("HPCCTL_SITE", &site)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("additionalimagestore=/srv/ro\n"));
    assert!(text.contains("/tmp/bob/podman/7.2/root\n"));
    assert!(text.contains("src=/scratch/bob/data,dst=/data\n"));

    let unknown = write(tmp.path(), "bad-site.toml", "store = \"/x\"\n");
    let o = hpcctl(&[
        "render",
        "--site",
        p(&unknown),
        p(&fixture("listing1.toml")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`store`"));

    let o = hpcctl(&[
        "render",
        "--shell",
        "--detach",
        p(&fixture("listing1.toml")),
    ]);
    let line = stdout(&o);
    assert!(line.starts_with("podman --ipc host"), "{line}");
    assert!(line.contains(" run --detach "));
    assert!(line.contains("--entrypoint \"\""));
}

#[test]
fn images_lifecycle() {
    let tmp = TempDir::new().unwrap();
    let store = tmp.path().join("store");
    let s = p(&store);
    let ray = fixture("images/ray");

    let o = hpcctl(&["images", "--store", s, "import", p(&ray)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("imported rayproject/ray:2.54.0 sha256:"));

    let o = hpcctl(&[
        "images",
        "--store",
        s,
        "migrate",
        "rayproject/ray:2.54.0",
        "--created-at",
        "1700000000",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = stdout(&o);
    assert!(
        first.starts_with("migrated rayproject/ray:2.54.0 sha256:"),
        "{first}"
    );
    let digest = first.split_whitespace().nth(2).unwrap().to_string();

    let o = hpcctl(&[
        "images",
        "--store",
        s,
        "migrate",
        "rayproject/ray:2.54.0",
        "--created-at",
        "1800000000",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        stdout(&o),
        format!("already present rayproject/ray:2.54.0 {digest}\n")
    );

    let o = hpcctl(&[
        "images",
        "--store",
        s,
        "migrate",
        "--layout",
        p(&fixture("images/python")),
        "--created-at",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = hpcctl(&["images", "--store", s, "list"]);
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.contains(&format!("rayproject/ray:2.54.0 {digest} 1700000000")));

    let o = hpcctl(&["images", "--store", s, "list", "--json"]);
    for line in stdout(&o).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["reference"].is_string() && v["digest"].is_string() && v["created_at"].is_u64());
    }

    let o = hpcctl(&["images", "--store", s, "remove", "nothing:here"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("unknown image reference nothing:here"));

    let o = hpcctl(&["images", "--store", s, "remove", "rayproject/ray:2.54.0"]);
    assert_eq!(code(&o), 0);
    let o = hpcctl(&["images", "--store", s, "list"]);
    assert!(!stdout(&o).contains("rayproject"));

    let o = hpcctl(&["images", "--store", s, "migrate", "not:staged"]);
    assert_eq!(code(&o), 3);
}

/// An environment for the python fixture image with one host bind mount.
fn run_env(dir: &Path, extra: &str) -> PathBuf {
    let host = dir.join("host-out");
    std::fs::create_dir_all(&host).unwrap();
    write(
        dir,
        "run.toml",
        &format!(
            "image = \"python:3.14-trixie\"\nmounts = [\"{}:/results\"]\n{extra}\n[env]\nFOO = \"bar\"\n",
            host.display()
        ),
    )
}

fn run_args<'a>(store: &'a str, edf: &'a str, layout: &'a str) -> Vec<&'a str> {
    vec!["run", "--store", store, "--import", layout, edf]
}

#[test]
fn run_echoes_environment() {
    let tmp = TempDir::new().unwrap();
    let edf = run_env(tmp.path(), "entrypoint = false");
    let store = tmp.path().join("store");
    let layout = fixture("images/python");
    let mut args = run_args(p(&store), p(&edf), p(&layout));
    args.extend(["--", "echo-env", "FOO", "LANG"]);
    let o = hpcctl(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "bar\nC.UTF-8\n");
}

#[test]
fn entrypoint_false_replaces_image_entrypoint() {
    let tmp = TempDir::new().unwrap();
    let store = tmp.path().join("store");
    let layout = fixture("images/python");

    let edf = run_env(tmp.path(), "");
    let mut args = run_args(p(&store), p(&edf), p(&layout));
    args.extend(["--", "echo-env", "FOO"]);
    let o = hpcctl(&args);
    // The image entrypoint `python3` runs and is not a known command.
    assert_eq!(code(&o), 127, "{}", stdout(&o));
    assert!(stderr(&o).contains("python3: command not found"));

    let edf = run_env(tmp.path(), "entrypoint = false");
    let mut args = run_args(p(&store), p(&edf), p(&layout));
    args.extend(["--", "echo-env", "FOO"]);
    assert_eq!(code(&hpcctl(&args)), 0);

    let args = run_args(p(&store), p(&edf), p(&layout));
    let o = hpcctl(&args);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no command"));
}

#[test]
fn run_writes_stay_in_the_upper_layer() {
    let tmp = TempDir::new().unwrap();
    let store = tmp.path().join("store");
    let layout = fixture("images/python");
    let edf = run_env(tmp.path(), "entrypoint = false");
    let report = tmp.path().join("report.json");
    let before = snapshot(tmp.path());
    let mut args = run_args(p(&store), p(&edf), p(&layout));
    args.extend(["--report", p(&report)]);
    args.extend([
        "--",
        "write",
        "/out/file",
        "data",
        ";",
        "read",
        "/out/file",
        ";",
        "exit",
        "3",
    ]);
    let o = hpcctl(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(stdout(&o), "data\n");
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let upper: Vec<&str> = r["upper"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(upper, ["/out", "/out/file"]);
    let mut after = snapshot(tmp.path());
    after.retain(|f| !f.starts_with("store") && f != "report.json");
    let mut before = before;
    before.retain(|f| !f.starts_with("store"));
    assert_eq!(before, after, "host files changed");

    // A bind mount is the way out.
    let mut args = run_args(p(&store), p(&edf), p(&layout));
    args.extend(["--", "write", "/results/r.txt", "kept"]);
    assert_eq!(code(&hpcctl(&args)), 0);
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("host-out/r.txt")).unwrap(),
        "kept"
    );
}

fn snapshot(dir: &Path) -> Vec<String> {
    let mut out: Vec<String> = walkdir(dir)
        .into_iter()
        .map(|p| p.strip_prefix(dir).unwrap().to_string_lossy().into_owned())
        .filter(|p| !p.ends_with(".staging") && !p.contains(".staging/"))
        .collect();
    out.sort();
    out
}

fn walkdir(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walkdir(&path));
        }
        out.push(path);
    }
    out
}

#[test]
fn run_applies_hooks() {
    let tmp = TempDir::new().unwrap();
    let store = tmp.path().join("store");
    let report = tmp.path().join("report.json");
    let o = hpcctl(&[
        "run",
        "--store",
        p(&store),
        "--import",
        p(&fixture("images/transformers")),
        "--hooks",
        p(&fixture("hooks")),
        "--report",
        p(&report),
        p(&fixture("listing1.toml")),
        "--",
        "echo-env",
        "FI_PROVIDER",
        "NCCL_NET_PLUGIN",
        "CUDA_MPS_PIPE_DIRECTORY",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "cxi\nofi\n/tmp/nvidia-mps\n");
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let stages: Vec<&str> = r["hook_actions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["stage"].as_str().unwrap())
        .collect();
    for s in ["cdi", "pce", "libinject", "ldcache", "mps"] {
        assert!(stages.contains(&s), "{s} missing from {stages:?}");
    }

    // Without a hook configuration the requested profiles do not exist.
    let o = hpcctl(&[
        "run",
        "--store",
        p(&store),
        p(&fixture("listing1.toml")),
        "--",
        "exit",
        "0",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("hook pipeline"), "{}", stderr(&o));
}

#[test]
fn run_without_image() {
    let tmp = TempDir::new().unwrap();
    let edf = run_env(tmp.path(), "entrypoint = false");
    let o = hpcctl(&[
        "run",
        "--store",
        p(&tmp.path().join("s")),
        p(&edf),
        "--",
        "exit",
        "0",
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("unknown image reference python:3.14-trixie"));
}

fn sim_edf(dir: &Path) -> PathBuf {
    write(
        dir,
        "sim.toml",
        "image = \"registry.example/ml/train:1.4\"\nmounts = [\"/scratch/$USER/data:/data\"]\nworkdir = \"/data\"\n",
    )
}

#[test]
fn sim_launch_warm_report() {
    let tmp = TempDir::new().unwrap();
    let edf = sim_edf(tmp.path());
    let out = tmp.path().join("out");
    let o = hpcctl(&[
        "sim-launch",
        p(&edf),
        "--nodes",
        "4",
        "--ranks-per-node",
        "4",
        "--mode",
        "warm",
        "--seed",
        "3",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("container_starts: 4\n"), "{report}");
    assert!(report.contains("migrations: 0\n"));
    assert!(report.contains("joins: 12\n"));
    assert!(report.contains("Podman-mediated startup"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["decomposition"]["rows"].as_array().unwrap().len(), 4);
    for line in std::fs::read_to_string(out.join("trace.jsonl"))
        .unwrap()
        .lines()
    {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn sim_launch_fault_fails() {
    let tmp = TempDir::new().unwrap();
    let edf = sim_edf(tmp.path());
    let out = tmp.path().join("out");
    let o = hpcctl(&[
        "sim-launch",
        p(&edf),
        "--nodes",
        "2",
        "--mode",
        "cold",
        "--fault",
        "acquire:migrate",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("acquisition-failed"), "{}", stderr(&o));
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let summary: serde_json::Value = serde_json::from_str(trace.lines().last().unwrap()).unwrap();
    assert_eq!(summary["status"]["status"], "failed");

    let o = hpcctl(&[
        "sim-launch",
        p(&edf),
        "--fault",
        "acquire:sideways",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("bad fault spec"));
}

#[test]
fn sim_launch_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let edf = sim_edf(tmp.path());
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = hpcctl(&[
            "sim-launch",
            p(&edf),
            "--mode",
            "cold",
            "--seed",
            seed,
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            std::fs::read(out.join("trace.jsonl")).unwrap(),
            std::fs::read(out.join("report.json")).unwrap(),
        )
    };
    assert_eq!(run("a", "9"), run("b", "9"));
    assert_ne!(run("c", "9").0, run("d", "10").0);
}

#[test]
fn kube_run_listing() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = hpcctl(&[
        "kube-run",
        p(&fixture("ray-demo.yaml")),
        "--registry",
        p(&fixture("images")),
        "--hooks",
        p(&fixture("hooks")),
        "--host-root",
        p(tmp.path()),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).ends_with("pod ray-demo Succeeded\n"));
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("host/results/result.json")).unwrap(),
        "{\"tasks\": 4}"
    );
    assert!(out.join("trace.jsonl").is_file() && out.join("result.json").is_file());
}

fn pod_yaml(init: &str, main: &str) -> String {
    format!(
        "apiVersion: v1\nkind: Pod\nmetadata:\n  name: t\nspec:\n  volumes:\n    - {{ name: w, emptyDir: {{}} }}\n{init}  containers:\n{main}"
    )
}

#[test]
fn kube_run_without_init_containers() {
    let tmp = TempDir::new().unwrap();
    let m = write(
        tmp.path(),
        "p.yaml",
        &pod_yaml(
            "",
            "    - name: a\n      image: python:3.14-trixie\n      command: [\"exit\", \"0\"]\n",
        ),
    );
    let out = tmp.path().join("out");
    let o = hpcctl(&[
        "kube-run",
        p(&m),
        "--registry",
        p(&fixture("images")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(first["phase"], "main");
    assert_eq!(first["event"], "started");
}

#[test]
fn failed_init_blocks_main() {
    let tmp = TempDir::new().unwrap();
    let m = write(
        tmp.path(),
        "p.yaml",
        &pod_yaml(
            "  initContainers:\n    - name: i\n      image: python:3.14-trixie\n      command: [\"exit\", \"5\"]\n",
            "    - name: a\n      image: python:3.14-trixie\n      command: [\"exit\", \"0\"]\n",
        ),
    );
    let out = tmp.path().join("out");
    let o = hpcctl(&[
        "kube-run",
        p(&m),
        "--registry",
        p(&fixture("images")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("i Init started=true exit=5"));
    assert!(stdout(&o).contains("a Main started=false exit=-"));
    assert!(stdout(&o).ends_with("pod t Failed\n"));
}

#[test]
fn kube_run_rejects_bad_manifests() {
    let tmp = TempDir::new().unwrap();
    let text = std::fs::read_to_string(fixture("ray-demo.yaml")).unwrap();
    let dep = write(
        tmp.path(),
        "d.yaml",
        &text.replace("kind: Pod", "kind: Deployment"),
    );
    let o = hpcctl(&["kube-run", p(&dep)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unsupported kind `Deployment`"));

    let undeclared = write(
        tmp.path(),
        "u.yaml",
        &text.replace(
            "- { name: results, mountPath: /results }",
            "- { name: outputs, mountPath: /results }",
        ),
    );
    let o = hpcctl(&["kube-run", p(&undeclared)]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("undeclared volume `outputs`"),
        "{}",
        stderr(&o)
    );

    let probe = write(
        tmp.path(),
        "x.yaml",
        &text.replace(
            "  restartPolicy: Never\n",
            "  restartPolicy: Never\n  hostNetwork: true\n",
        ),
    );
    let o = hpcctl(&["kube-run", p(&probe)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`hostNetwork`"), "{}", stderr(&o));
}

#[test]
fn bench_outputs() {
    let o = hpcctl(&["bench", "pynamic", "--nodes", "8", "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0]["layout"], "plain");
    assert!(recs[0]["total_metadata_ops"].as_u64().unwrap() >= 8 * 495);
    assert_eq!(recs[1]["layout"], "squashed");

    let o = hpcctl(&["bench", "startup", "--reps", "3", "--nodes", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("of which: namespace join"));
    assert!(stdout(&o).contains("(3 repetitions, 2 nodes)"));
    assert_eq!(
        stdout(&o),
        stdout(&hpcctl(&[
            "bench", "startup", "--reps", "3", "--nodes", "2"
        ]))
    );
}

#[test]
fn usage_errors() {
    let o = hpcctl(&["sim-launch"]);
    assert_eq!(code(&o), 2);
    let o = hpcctl(&["--help"]);
    assert_eq!(code(&o), 0);
    for cmd in [
        "validate",
        "render",
        "images",
        "run",
        "sim-launch",
        "kube-run",
        "bench",
    ] {
        assert!(stdout(&o).contains(cmd), "{cmd}");
    }
}
