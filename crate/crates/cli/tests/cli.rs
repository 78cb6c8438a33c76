use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gcq::gridworld::{render, Action, Dataset, EnvState, MazeSpec, TrajectoryRecord};

const TINY: &str = "\
[cann]
neurons = 4

[model]
encoder = 16
decoder = 16

[training]
epochs = 2
batch = 8
lr = 1e-3

[env]
height = 4
width = 4
cell_pixels = 2

[data]
records = 64
length = 8
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.ini"), config).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], seed: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gcq"));
        cmd.current_dir(self.dir.path())
            .arg(args[0])
            .arg("--config")
            .arg("run.ini")
            .args(&args[1..]);
        cmd.env_remove("GCQ_SEED");
        if let Some(s) = seed {
            cmd.env("GCQ_SEED", s);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

/// Independent binary graymap reader: returns (width, height, pixels).
fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let raster = bytes[i + 1..].to_vec();
    assert_eq!(raster.len(), w * h);
    (w, h, raster)
}

fn checksum_line(stdout: &str) -> String {
    stdout.split_whitespace().last().unwrap().to_string()
}

#[test]
fn gen_data_is_deterministic_and_seedable() {
    let ws = Workspace::new(TINY);
    let first = ws.ok(&["gen-data"]);
    assert!(first.starts_with("records 64 length 8 checksum "));
    let bytes = fs::read(ws.path("data.gcqd")).unwrap();
    assert_eq!(Dataset::from_bytes(&bytes).unwrap().records.len(), 64);
    let again = ws.ok(&["gen-data"]);
    assert_eq!(checksum_line(&first), checksum_line(&again));
    assert_eq!(fs::read(ws.path("data.gcqd")).unwrap(), bytes);
    let reseeded = ws.run_env(&["gen-data"], Some("7"));
    assert!(reseeded.status.success());
    assert_ne!(
        checksum_line(&String::from_utf8(reseeded.stdout).unwrap()),
        checksum_line(&first)
    );
    assert_eq!(ws.run_env(&["gen-data"], Some("seven")).status.code(), Some(2));
}

#[test]
fn config_errors_exit_two_and_name_the_section() {
    let ws = Workspace::new("[actions]\nstay = stay stay\nup = -1 stay\ndown = +1 stay\nleft = stay -1\n");
    let out = ws.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[actions]"));
    let ws = Workspace::new("[training]\nepochs = many\n");
    assert_eq!(ws.run(&["gen-data"]).status.code(), Some(2));
    let missing = Command::new(env!("CARGO_BIN_EXE_gcq"))
        .args(["gen-data", "--config", "/nonexistent/run.ini"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn training_writes_metrics_and_resumes_identically() {
    let ws = Workspace::new(TINY);
    ws.ok(&["gen-data"]);
    ws.ok(&["train"]);
    let straight = fs::read_to_string(ws.path("out/metrics.csv")).unwrap();
    assert_eq!(straight.lines().count(), 3);
    let ck = fs::read(ws.path("model.gcqc")).unwrap();
    ws.ok(&["train"]);
    assert_eq!(fs::read_to_string(ws.path("out/metrics.csv")).unwrap(), straight);
    assert_eq!(fs::read(ws.path("model.gcqc")).unwrap(), ck);

    let split = Workspace::new(&TINY.replace("epochs = 2", "epochs = 1"));
    split.ok(&["gen-data"]);
    split.ok(&["train"]);
    fs::write(split.path("run.ini"), TINY).unwrap();
    split.ok(&["train", "--resume"]);
    assert_eq!(fs::read_to_string(split.path("out/metrics.csv")).unwrap(), straight);
    assert_eq!(fs::read(split.path("model.gcqc")).unwrap(), ck);
}

#[test]
fn predict_plan_invert_and_inspect_outputs() {
    let ws = Workspace::new(TINY);
    ws.ok(&["gen-data"]);
    ws.ok(&["train"]);

    let report = ws.ok(&["predict", "--init", "3", "--horizon", "0"]);
    assert!(report.contains("horizon 0 psnr"));
    assert!(!report.contains("horizon 1 "));
    let report = ws.ok(&["predict", "--init", "2", "--horizon", "4"]);
    assert_eq!(report.lines().filter(|l| l.starts_with("horizon")).count(), 5);
    let (w, h, _) = read_pgm(&ws.path("out/predict_pred.pgm"));
    assert_eq!((w, h), (4 * 9 - 1, 8));
    assert_eq!(
        ws.run(&["predict", "--init", "3", "--horizon", "6"]).status.code(),
        Some(3)
    );
    let looped = ws.ok(&["predict", "--init", "2", "--actions", "up,up,up,up"]);
    assert!(looped.contains("final psnr"));

    let plan = ws.ok(&["plan", "--start", "1,2", "--goal", "1,2"]);
    assert!(plan.starts_with("steps 0 "));
    assert_eq!(fs::read_to_string(ws.path("out/plan.csv")).unwrap().lines().count(), 2);
    assert_eq!(
        ws.run(&["plan", "--start", "9,9", "--goal", "0,0"]).status.code(),
        Some(3)
    );

    // A trajectory that never moves inverts to no-ops only.
    let maze = MazeSpec::open_torus(4, 4, 2);
    let frame = render(&maze, EnvState { row: 2, col: 1 });
    let still = Dataset {
        length: 5,
        height: 8,
        width: 8,
        records: vec![TrajectoryRecord {
            frames: vec![frame; 5],
            actions: vec![Action::Stay; 4],
        }],
    };
    fs::write(ws.path("still.gcqd"), still.to_bytes()).unwrap();
    let actions = ws.ok(&["invert", "--trajectory", "still.gcqd", "--transport-from", "0,0"]);
    assert_eq!(actions.lines().count(), 4);
    assert!(actions.lines().all(|l| l.ends_with(" stay")));
    let transport = fs::read_to_string(ws.path("out/transport.csv")).unwrap();
    let rows: Vec<&str> = transport.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows
        .windows(2)
        .all(|w| w[0].split_once(',').unwrap().1 == w[1].split_once(',').unwrap().1));

    ws.ok(&["inspect"]);
    for entry in fs::read_dir(ws.path("out")).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "pgm") {
            read_pgm(&p);
        }
    }
}

#[test]
fn inspect_images_follow_the_codebook() {
    let ws = Workspace::new("[cann]\nneurons = 16\nstrength = 1\ninhibition = 0.02\n");
    let out = ws.ok(&["inspect", "--samples", "4"]);
    let worst: f64 = out.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst < 1e-6, "max residual {worst}");
    let table = fs::read_to_string(ws.path("out/residuals.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 16);

    // Ring images are 16 neurons wide, upscaled 8x.
    let (w, h, base) = read_pgm(&ws.path("out/codeword_f0_0.pgm"));
    assert_eq!((w, h), (128, 8));
    let argmax = (0..w).max_by_key(|&x| (base[x], std::cmp::Reverse(x))).unwrap();
    assert_eq!(argmax / 8, 0);
    let (_, _, moved) = read_pgm(&ws.path("out/codeword_f0_4.pgm"));
    let shift = 4 * 8;
    for y in 0..h {
        for x in 0..w {
            assert_eq!(moved[y * w + (x + shift) % w], base[y * w + x]);
        }
    }
    let (gw, gh, grid) = read_pgm(&ws.path("out/grid_pattern.pgm"));
    assert_eq!((gw, gh), (3 * 16 * 4, 3 * 16 * 4));
    // Periodic along both axes with the ring period.
    let period = 16 * 4;
    for y in 0..gh - period {
        for x in 0..gw - period {
            assert_eq!(grid[y * gw + x], grid[(y + period) * gw + x + period]);
        }
    }
}
