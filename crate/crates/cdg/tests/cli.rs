use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdg::checkpoint::Checkpoint;
use cdg::{distfile, pnm};
use cdg_core::pipeline::predict;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn cdg(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    let (ckpt, log) = (
        dir.join(format!("{name}.ckpt")),
        dir.join(format!("{name}.csv")),
    );
    let o = cdg(&[
        &"train",
        &"--config",
        &fixture("tiny.ini"),
        &"--checkpoint",
        &ckpt,
        &"--log",
        &log,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (ckpt, log)
}

#[test]
fn usage_errors_exit_one() {
    let o = cdg(&[&"transmogrify"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&cdg(&[])), 1);
    assert_eq!(code(&cdg(&[&"gradcheck", &"--seed", &"minus"])), 1);
    assert_eq!(code(&cdg(&[&"heatmap", &"--out", &"x.pgm"])), 1);
}

#[test]
fn help_and_version_exit_zero() {
    let o = cdg(&[&"--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("encode"));
    assert_eq!(code(&cdg(&[&"--version"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(
        code(&cdg(&[
            &"encode",
            &"--label",
            &fixture("bad_maxval.pgm"),
            &"--out",
            &out
        ])),
        2
    );
    assert_eq!(
        code(&cdg(&[
            &"encode",
            &"--label",
            &dir.path().join("none.pgm"),
            &"--out",
            &out
        ])),
        2
    );
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[train]\nepoch = 3\n").unwrap();
    let o = cdg(&[
        &"train",
        &"--config",
        &cfg,
        &"--checkpoint",
        &dir.path().join("c"),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.ini");
    std::fs::write(&cfg, "[train]\nepochs = 3\nbatch_size = 2\ncrop_size = 16\nlr = 1e30\n[model]\nchannels = 4\n[data]\ncount = 2\nheight = 16\nwidth = 16\n").unwrap();
    let ckpt = dir.path().join("c");
    assert_eq!(
        code(&cdg(&[&"train", &"--config", &cfg, &"--checkpoint", &ckpt])),
        3
    );
    assert!(!ckpt.exists());
}

#[test]
fn gradcheck_passes_on_seed_zero() {
    let o = cdg(&[&"gradcheck", &"--seed", &"0"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("cdg.alpha") && text.contains("cdg.beta"));
    assert!(!text.contains("FAIL"));
    assert_eq!(code(&cdg(&[&"gradcheck", &"--tolerance", &"1e-30"])), 3);
}

#[test]
fn encode_reproduces_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("two");
    let o = cdg(&[
        &"encode",
        &"--label",
        &fixture("two_by_two.pgm"),
        &"--normalize",
        &"--out",
        &prefix,
    ]);
    assert_eq!(code(&o), 0);
    for axis in ["horizontal", "vertical"] {
        let got = std::fs::read(dir.path().join(format!("two.{axis}.txt"))).unwrap();
        let want = std::fs::read(fixture(&format!("two_by_two.{axis}.txt"))).unwrap();
        assert_eq!(got, want, "{axis}");
    }

    let o = cdg(&[
        &"encode",
        &"--label",
        &fixture("two_by_two.pgm"),
        &"--out",
        &prefix,
    ]);
    assert_eq!(code(&o), 0);
    let counts = distfile::read(&dir.path().join("two.horizontal.txt")).unwrap();
    assert_eq!(counts.values, [1.0, 1.0, 0.0, 2.0]);
    assert!(!counts.normalized);
}

#[test]
fn identical_invocations_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (ca, la) = train_tiny(dir.path(), "a");
    let (cb, lb) = train_tiny(dir.path(), "b");
    assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());
    let log = std::fs::read_to_string(&la).unwrap();
    assert_eq!(log, std::fs::read_to_string(&lb).unwrap());
    assert!(log.starts_with("epoch,lr,total,parsing,edge,cdg,train_miou\n"));
    assert_eq!(log.lines().count(), 3);

    for name in ["s1", "s2"] {
        assert_eq!(
            code(&cdg(&[
                &"synth",
                &"--config",
                &fixture("tiny.ini"),
                &"--out",
                &dir.path().join(name)
            ])),
            0
        );
    }
    for f in ["images/0002.ppm", "labels/0000.pgm"] {
        assert_eq!(
            std::fs::read(dir.path().join("s1").join(f)).unwrap(),
            std::fs::read(dir.path().join("s2").join(f)).unwrap()
        );
    }
}

#[test]
fn infer_eval_and_heatmap_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = train_tiny(dir.path(), "net");
    let data = dir.path().join("data");
    assert_eq!(
        code(&cdg(&[
            &"synth",
            &"--config",
            &fixture("tiny.ini"),
            &"--out",
            &data
        ])),
        0
    );
    let image = data.join("images/0001.ppm");

    let pred = dir.path().join("pred.pgm");
    assert_eq!(
        code(&cdg(&[
            &"infer",
            &"--checkpoint",
            &ckpt,
            &"--image",
            &image,
            &"--out",
            &pred
        ])),
        0
    );
    let net = Checkpoint::load(&ckpt).unwrap().net;
    let direct = predict(&net, &pnm::read_image(&image).unwrap()).unwrap();
    assert_eq!(pnm::read_label(&pred, Some(5)).unwrap(), direct);

    let flipped = dir.path().join("flip.pgm");
    let o = cdg(&[
        &"infer",
        &"--checkpoint",
        &ckpt,
        &"--image",
        &image,
        &"--out",
        &flipped,
        &"--scales",
        &"0.75,1,1.25",
        &"--flip",
    ]);
    assert_eq!(code(&o), 0);

    let csv = dir.path().join("m.csv");
    let o = cdg(&[
        &"eval",
        &"--checkpoint",
        &ckpt,
        &"--images",
        &data.join("images"),
        &"--labels",
        &data.join("labels"),
        &"--out",
        &csv,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(&csv).unwrap();
    let keys: Vec<&str> = metrics
        .lines()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        keys[..8],
        [
            "metric",
            "pixel_acc",
            "mean_acc",
            "mean_iou",
            "fg_acc",
            "precision",
            "recall",
            "f1"
        ]
    );
    assert_eq!(keys.len(), 8 + 5);

    for (map, w, h) in [("ph", 5, 4), ("pv", 5, 4), ("ad", 4, 4)] {
        let out = dir.path().join(format!("{map}.pgm"));
        let o = cdg(&[
            &"heatmap",
            &"--checkpoint",
            &ckpt,
            &"--image",
            &image,
            &"--map",
            &map,
            &"--out",
            &out,
        ]);
        assert_eq!(code(&o), 0, "{map}: {}", String::from_utf8_lossy(&o.stderr));
        let r = pnm::decode(&std::fs::read(&out).unwrap(), "heatmap").unwrap();
        assert_eq!((r.width, r.height), (w, h), "{map}");
    }

    let strip = dir.path().join("strip.pgm");
    assert_eq!(
        code(&cdg(&[
            &"heatmap",
            &"--dist",
            &fixture("two_by_two.vertical.txt"),
            &"--out",
            &strip
        ])),
        0
    );
    assert_eq!(
        std::fs::read(&strip).unwrap(),
        b"P5\n2 2\n255\n\x80\x80\x00\xff"
    );
}
