use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Sandbox {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn write(&self, rel: &str, text: &str) {
        let p = self.path(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bisgml"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
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

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }

    /// Four small synthetic states under `corpus/`.
    fn corpus(&self) {
        self.write("synth.cfg", "synth.records = 1500\n");
        self.ok(&[
            "synth",
            "--config",
            "synth.cfg",
            "--seed",
            "3",
            "--out",
            "corpus",
        ]);
    }

    /// Tables trained on FL, GA and NC with CA held out, under `tables/`.
    fn tables(&self) {
        self.write("tables.cfg", &tables_config("data.held_out = CA\n"));
        self.ok(&["build-tables", "--config", "tables.cfg", "--out", "tables"]);
    }
}

const STATES: [&str; 4] = ["CA", "FL", "GA", "NC"];

fn state_lines(states: &[&str]) -> String {
    let mut s = String::new();
    for st in states {
        s.push_str(&format!(
            "state.{st}.person_file = corpus/persons_{st}.csv\n"
        ));
        s.push_str(&format!("state.{st}.block_file = corpus/blocks_{st}.csv\n"));
    }
    s
}

fn tables_config(extra: &str) -> String {
    format!(
        "data.surname_file = corpus/surnames_national.csv\n{}{extra}",
        state_lines(&STATES)
    )
}

fn is_empty_or_missing(p: &Path) -> bool {
    !p.exists() || std::fs::read_dir(p).unwrap().next().is_none()
}

const HEADER: &str = "record_id,surname,first_name,middle_name,state,block_id,race";

#[test]
fn empty_input_gives_header_only_and_rows_keep_order() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.tables();
    sb.write("empty.csv", &format!("{HEADER}\n"));
    sb.write(
        "three.csv",
        &format!(
            "{HEADER}\nz9,HALAA,LARAA,,CA,060010000011001,white\na1,,,,CA,bad,\nm5,OKOAA,DEMAA,ANNAA,CA,060010000011002,black\n"
        ),
    );
    sb.write(
        "p_empty.cfg",
        "tables.dir = tables\ndata.input = empty.csv\n",
    );
    sb.write(
        "p_three.cfg",
        "tables.dir = tables\ndata.input = three.csv\n",
    );
    sb.ok(&[
        "predict",
        "--config",
        "p_empty.cfg",
        "--method",
        "extended",
        "--out",
        "pe",
    ]);
    let text = String::from_utf8(sb.read("pe/predictions.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(
        text.starts_with(HEADER) && text.contains("pred_white") && text.contains("fallback_flags")
    );

    sb.ok(&[
        "predict",
        "--config",
        "p_three.cfg",
        "--method",
        "bisg",
        "--out",
        "p3",
    ]);
    let text = String::from_utf8(sb.read("p3/predictions.csv")).unwrap();
    let ids: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(ids, ["z9", "a1", "m5"]);
    let bad = text.lines().nth(2).unwrap();
    assert!(bad.ends_with(",,,,,,,malformed"), "{bad}");
    for line in [1, 3] {
        let fields: Vec<&str> = text.lines().nth(line).unwrap().split(',').collect();
        let sum: f64 = fields[7..12]
            .iter()
            .map(|v| v.parse::<f64>().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn missing_input_fails_without_outputs() {
    let sb = Sandbox::new();
    sb.write(
        "t.cfg",
        "data.surname_file = nowhere/surnames.csv\nstate.NC.person_file = nowhere/p.csv\nstate.NC.block_file = nowhere/b.csv\n",
    );
    let out = sb.run(&["build-tables", "--config", "t.cfg", "--out", "tables"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    assert!(is_empty_or_missing(&sb.path("tables")));

    sb.write("p.cfg", "tables.dir = tables\ndata.input = nowhere.csv\n");
    assert_ne!(
        sb.code(&["predict", "--config", "p.cfg", "--method", "bisg", "--out", "pred"]),
        0
    );
    assert!(is_empty_or_missing(&sb.path("pred")));
}

#[test]
fn rebuilding_tables_is_byte_identical() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.tables();
    sb.ok(&["build-tables", "--config", "tables.cfg", "--out", "tables2"]);
    for f in [
        "surnames.json",
        "geo.json",
        "first_names.json",
        "middle_names.json",
        "manifest.json",
    ] {
        assert_eq!(
            sb.read(&format!("tables/{f}")),
            sb.read(&format!("tables2/{f}")),
            "{f}"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&sb.read("tables/manifest.json")).unwrap();
    assert_eq!(manifest["held_out"], "CA");
    assert_eq!(
        manifest["training_states"],
        serde_json::json!(["FL", "GA", "NC"])
    );
}

#[test]
fn output_directory_must_be_new_or_empty() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.tables();
    assert_eq!(
        sb.code(&["build-tables", "--config", "tables.cfg", "--out", "tables"]),
        2
    );
}

#[test]
fn config_errors_exit_2() {
    let sb = Sandbox::new();
    sb.write("bad.cfg", "run.sede = 4\n");
    let out = sb.run(&["synth", "--config", "bad.cfg", "--out", "c"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.sede"));
    sb.write("bad2.cfg", "this line has no equals sign\n");
    assert_eq!(sb.code(&["synth", "--config", "bad2.cfg", "--out", "c"]), 2);
    assert_eq!(
        sb.code(&["synth", "--config", "missing.cfg", "--out", "c"]),
        2
    );
    assert!(is_empty_or_missing(&sb.path("c")));
}

#[test]
fn loso_needs_two_states() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.write(
        "l.cfg",
        &format!(
            "data.surname_file = corpus/surnames_national.csv\n{}",
            state_lines(&["NC"])
        ),
    );
    assert_eq!(
        sb.code(&["loso", "--config", "l.cfg", "--method", "bisg", "--out", "lo"]),
        2
    );
    assert!(is_empty_or_missing(&sb.path("lo")));
}

#[test]
fn leakage_exits_4() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.write(
        "held.cfg",
        &tables_config("data.held_out = CA\ndata.states = FL,CA\n"),
    );
    assert_eq!(
        sb.code(&["build-tables", "--config", "held.cfg", "--out", "t1"]),
        4
    );
    assert!(is_empty_or_missing(&sb.path("t1")));

    // Held-out rows slipped into a training state's person file.
    let ca = String::from_utf8(sb.read("corpus/persons_CA.csv")).unwrap();
    let mut fl = String::from_utf8(sb.read("corpus/persons_FL.csv")).unwrap();
    fl.push_str(ca.lines().nth(1).unwrap());
    fl.push('\n');
    sb.write("corpus/persons_FL.csv", &fl);
    sb.write("tables.cfg", &tables_config("data.held_out = CA\n"));
    assert_eq!(
        sb.code(&["build-tables", "--config", "tables.cfg", "--out", "t2"]),
        4
    );
    assert!(is_empty_or_missing(&sb.path("t2")));
}

#[test]
fn training_on_held_out_rows_exits_4() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.tables();
    sb.write(
        "t.cfg",
        "tables.dir = tables\ndata.input = corpus/persons_CA.csv\n",
    );
    assert_eq!(
        sb.code(&["train", "--config", "t.cfg", "--method", "mlr", "--out", "m"]),
        4
    );
    assert!(is_empty_or_missing(&sb.path("m")));
}

#[test]
fn train_then_predict_with_model() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.tables();
    sb.write("t.cfg", "tables.dir = tables\ndata.states = FL,GA,NC\nstate.FL.person_file = corpus/persons_FL.csv\nstate.GA.person_file = corpus/persons_GA.csv\nstate.NC.person_file = corpus/persons_NC.csv\nmodel.iterations = 20\n");
    sb.ok(&[
        "train", "--config", "t.cfg", "--method", "gbm", "--layout", "extended", "--out", "m",
    ]);
    sb.write(
        "p.cfg",
        "tables.dir = tables\ndata.input = corpus/persons_CA.csv\nmodel.file = m/model.json\n",
    );
    sb.ok(&[
        "predict", "--config", "p.cfg", "--method", "gbm", "--out", "pg",
    ]);
    let text = String::from_utf8(sb.read("pg/predictions.csv")).unwrap();
    assert_eq!(text.lines().count(), 1501);
    assert_eq!(
        sb.code(&[
            "predict", "--config", "p.cfg", "--method", "gbm", "--layout", "base", "--out", "px"
        ]),
        2
    );
    assert_eq!(
        sb.code(&["predict", "--config", "p.cfg", "--method", "mlr", "--out", "py"]),
        2
    );

    sb.write("e.cfg", "evaluate.predictions = pg/predictions.csv\n");
    let shown = sb.ok(&["evaluate", "--config", "e.cfg", "--out", "ev"]);
    assert!(shown.contains("AUC") && shown.contains("pg"));
    let metrics = String::from_utf8(sb.read("ev/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 5);
}

#[test]
fn tune_writes_cv_table() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.tables();
    sb.write(
        "t.cfg",
        "tables.dir = tables\ndata.states = NC\nstate.NC.person_file = corpus/persons_NC.csv\ntune.samples = 3\ntune.folds = 3\ntune.range.lambda = 1e-4 1e-1 log\n",
    );
    sb.ok(&[
        "tune", "--config", "t.cfg", "--method", "elnet", "--out", "tu",
    ]);
    let table = String::from_utf8(sb.read("tu/cv_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    let best: serde_json::Value = serde_json::from_slice(&sb.read("tu/best_params.json")).unwrap();
    assert_eq!(best["family"], "elnet");
    sb.write("bad.cfg", "tables.dir = tables\ndata.states = NC\nstate.NC.person_file = corpus/persons_NC.csv\ntune.range.n_trees = 1 5\n");
    assert_eq!(
        sb.code(&["tune", "--config", "bad.cfg", "--method", "elnet", "--out", "tb"]),
        2
    );
}

fn checksums(sb: &Sandbox, dir: &str) -> serde_json::Value {
    serde_json::from_slice(&sb.read(&format!("{dir}/checksums.json"))).unwrap()
}

#[test]
fn synth_seed_and_knob_sweep() {
    let sb = Sandbox::new();
    sb.write("s.cfg", "synth.records = 300\nsynth.states = GA,NC\n");
    sb.ok(&["synth", "--config", "s.cfg", "--seed", "1", "--out", "a"]);
    sb.ok(&["synth", "--config", "s.cfg", "--seed", "1", "--out", "b"]);
    sb.ok(&["synth", "--config", "s.cfg", "--seed", "2", "--out", "c"]);
    assert_eq!(checksums(&sb, "a"), checksums(&sb, "b"));
    assert_ne!(checksums(&sb, "a"), checksums(&sb, "c"));
    assert!(!sb.path("a/persons_CA.csv").exists());

    sb.write(
        "k.cfg",
        "synth.records = 300\nsynth.states = NC\nsynth.knobs = 0,0.5,1\n",
    );
    sb.ok(&["synth", "--config", "k.cfg", "--out", "k"]);
    let mut dirs: Vec<String> = std::fs::read_dir(sb.path("k"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("knob_"))
        .collect();
    dirs.sort();
    assert_eq!(dirs, ["knob_0", "knob_0.5", "knob_1"]);
    for d in &dirs {
        assert!(sb.path(&format!("k/{d}/persons_NC.csv")).exists());
    }
}

#[test]
fn loso_report_sets_are_deterministic() {
    let sb = Sandbox::new();
    sb.corpus();
    sb.write(
        "l.cfg",
        &format!(
            "data.surname_file = corpus/surnames_national.csv\ndata.synth_spec = corpus/spec.json\nsample.train_rows = 2000\n{}",
            state_lines(&STATES)
        ),
    );
    sb.ok(&[
        "loso",
        "--config",
        "l.cfg",
        "--method",
        "extended,tree",
        "--layout",
        "extended",
        "--out",
        "lo1",
    ]);
    sb.ok(&[
        "loso",
        "--config",
        "l.cfg",
        "--method",
        "extended,tree",
        "--layout",
        "extended",
        "--out",
        "lo2",
    ]);
    for st in STATES {
        for f in [
            "metrics.csv",
            "calibration.csv",
            "comparison_auc.csv",
            "manifest_extended.json",
            "manifest_tree_extended.json",
            "model_tree_extended.json",
        ] {
            let rel = format!("{st}/{f}");
            assert_eq!(
                sb.read(&format!("lo1/{rel}")),
                sb.read(&format!("lo2/{rel}")),
                "{rel}"
            );
        }
        let m: serde_json::Value =
            serde_json::from_slice(&sb.read(&format!("lo1/{st}/manifest_tree_extended.json")))
                .unwrap();
        assert_eq!(m["held_out"], st);
        assert_eq!(m["held_out_absent_from_training"], true);
        assert!(!m["training_states"]
            .as_array()
            .unwrap()
            .iter()
            .any(|s| s == st));
    }
    let comparison = String::from_utf8(sb.read("lo1/comparison.txt")).unwrap();
    assert!(comparison.contains("oracle/extended") && comparison.contains("tree/extended"));
    assert_eq!(sb.read("lo1/metrics.csv"), sb.read("lo2/metrics.csv"));
}

#[test]
fn resolved_config_lists_defaults() {
    let sb = Sandbox::new();
    sb.write("s.cfg", "synth.records = 50\nsynth.states = NC\n");
    sb.ok(&["synth", "--config", "s.cfg", "--seed", "9", "--out", "c"]);
    let text = String::from_utf8(sb.read("c/config.resolved")).unwrap();
    assert!(text.contains("run.seed = 9"));
    assert!(text.contains("predict.chunk_rows = 65536"));
    let keys: Vec<&str> = text.lines().filter_map(|l| l.split(" = ").next()).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}
