//! Command-line front end. Subcommands: gen-data, pretrain, probe,
//! equiscore, ablate, flops, check. Exit codes: 0 success, 1 usage error,
//! 2 config error, 3 runtime/numeric error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use softequiv::config::{self, Config, Precision};
use softequiv::data::{self, SyntheticSpec};
use softequiv::eval::{
    self, ablation_sweep, default_knn_k, equivariance_score, extract_features, knn_probe,
    linear_probe, mlp_probe, transform_probe, CostModel, Family, ProbeDataset, ReprKind,
    SweepAxis, TransformTask, SWEEP_CSV_HEADER,
};
use softequiv::scalar::Scalar;
use softequiv::train::{checkpoint_config, Trainer};

const USAGE: &str = "\
usage: ser [GLOBAL FLAGS] <subcommand> [ARGS]

subcommands:
  gen-data   --out <file.serd> [--n N] [--side S] [--patch P] [--classes C]
  pretrain   [--resume <ckpt.serc>] [--data <file.serd>]
  probe      --ckpt <ckpt.serc> --data <file.serd>
             --kind {linear,knn,mlp,transform,scatter}
             [--label {class,orientation}] [--repr {cls,tokens,pooled}]
             [--layer L] [--task {rotation4,hflip2}] [--k K] [--hidden H]
             [--scatter-out <csv>] [--dump-features <file.sert>]
  equiscore  --ckpt <ckpt.serc> --data <file.serd> --layer L --family {rot90,hflip,scale}
             [--samples N]
  ablate     --axis {layer,cls,lambda,ratio,group-elements,all-layers}
             --values a,b,c --seeds 1,2,3 [--data <file.serd>]
  flops      [--preset {desk,vit-s16}] [--r R]
  check

global flags:
  --config <file>        key = value config file (strict; unknown keys error)
  --seed <u64>           override train.seed
  --precision {f32,f64}  override train.precision
  --out-dir <dir>        output directory (default runs/)
  --write-defaults <p>   write every key with its default to <p> and exit

config defaults (see --write-defaults for a parseable copy):
";

fn print_usage() {
    print!("{USAGE}");
    for line in Config::default().echo().lines() {
        println!("  {line}");
    }
}

struct Args {
    flags: Vec<(String, String)>,
    subcommand: Option<String>,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    let mut flags = Vec::new();
    let mut subcommand = None;
    let mut i = 0;
    while i < argv.len() {
        let a = &argv[i];
        if let Some(name) = a.strip_prefix("--") {
            if name == "help" {
                flags.push(("help".into(), String::new()));
                i += 1;
                continue;
            }
            let value = argv
                .get(i + 1)
                .ok_or_else(|| format!("flag --{name} needs a value"))?;
            flags.push((name.to_string(), value.clone()));
            i += 2;
        } else {
            if subcommand.is_some() {
                return Err(format!("unexpected argument `{a}`"));
            }
            subcommand = Some(a.clone());
            i += 1;
        }
    }
    Ok(Args { flags, subcommand })
}

impl Args {
    fn get(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    fn has(&self, name: &str) -> bool {
        self.flags.iter().any(|(k, _)| k == name)
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = match parse_args(&argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            print_usage();
            return ExitCode::from(1);
        }
    };
    if args.has("help") || (args.subcommand.is_none() && !args.has("write-defaults")) {
        print_usage();
        return ExitCode::from(if args.has("help") { 0 } else { 1 });
    }
    if let Some(path) = args.get("write-defaults") {
        return match config::write_defaults(Path::new(path)) {
            Ok(()) => {
                println!("wrote defaults to {path}");
                ExitCode::from(0)
            }
            Err(e) => {
                eprintln!("config error: {e}");
                ExitCode::from(2)
            }
        };
    }

    // assemble the effective config: file, then flag overrides
    let mut cfg = match args.get("config") {
        Some(path) => match Config::parse_file(Path::new(path)) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("config error: {e}");
                return ExitCode::from(2);
            }
        },
        None => Config::default(),
    };
    if let Some(seed) = args.get("seed") {
        match seed.parse() {
            Ok(s) => cfg.seed = s,
            Err(_) => {
                eprintln!("error: bad --seed `{seed}`");
                return ExitCode::from(1);
            }
        }
    }
    if let Some(p) = args.get("precision") {
        cfg.precision = match p {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            _ => {
                eprintln!("error: bad --precision `{p}` (expected f32 or f64)");
                return ExitCode::from(1);
            }
        };
    }
    let out_dir = PathBuf::from(args.get("out-dir").unwrap_or("runs"));

    let sub = args.subcommand.clone().unwrap();
    // every subcommand prints the effective config first
    println!("# effective config");
    for line in cfg.echo().lines() {
        println!("#   {line}");
    }

    let result = match sub.as_str() {
        "gen-data" => cmd_gen_data(&args, &cfg),
        "pretrain" => dispatch_precision(&cfg, |c| cmd_pretrain::<f32>(&args, c, &out_dir), |c| {
            cmd_pretrain::<f64>(&args, c, &out_dir)
        }),
        "probe" => dispatch_ckpt(&args, |p| cmd_probe::<f32>(&args, p), |p| cmd_probe::<f64>(&args, p)),
        "equiscore" => dispatch_ckpt(
            &args,
            |p| cmd_equiscore::<f32>(&args, p),
            |p| cmd_equiscore::<f64>(&args, p),
        ),
        "ablate" => dispatch_precision(
            &cfg,
            |c| cmd_ablate::<f32>(&args, c, &out_dir),
            |c| cmd_ablate::<f64>(&args, c, &out_dir),
        ),
        "flops" => cmd_flops(&args, &cfg),
        "check" => cmd_check(),
        other => {
            eprintln!("error: unknown subcommand `{other}`");
            print_usage();
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(()) => ExitCode::from(0),
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(CliError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("runtime error: {e}");
            ExitCode::from(3)
        }
    }
}

enum CliError {
    Usage(String),
    Config(String),
    Runtime(String),
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> CliError {
    CliError::Runtime(e.to_string())
}

fn dispatch_precision(
    cfg: &Config,
    f32_path: impl FnOnce(&Config) -> Result<(), CliError>,
    f64_path: impl FnOnce(&Config) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match cfg.precision {
        Precision::F32 => f32_path(cfg),
        Precision::F64 => f64_path(cfg),
    }
}

/// Checkpoint-driven subcommands take their precision from the checkpoint's
/// own manifest.
fn dispatch_ckpt(
    args: &Args,
    f32_path: impl FnOnce(&Path) -> Result<(), CliError>,
    f64_path: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let ckpt = args
        .get("ckpt")
        .ok_or_else(|| usage("--ckpt is required"))?;
    let path = Path::new(ckpt).to_path_buf();
    let cfg = checkpoint_config(&path).map_err(|e| CliError::Config(e.to_string()))?;
    match cfg.precision {
        Precision::F32 => f32_path(&path),
        Precision::F64 => f64_path(&path),
    }
}

fn cmd_gen_data(args: &Args, cfg: &Config) -> Result<(), CliError> {
    let out = args.get("out").ok_or_else(|| usage("--out is required"))?;
    let spec = SyntheticSpec {
        n_images: parse_or(args, "n", 2000)?,
        side: parse_or(args, "side", cfg.model.image)?,
        patch: parse_or(args, "patch", cfg.model.patch)?,
        n_classes: parse_or(args, "classes", 5)?,
    };
    let ds = data::gen_data(&spec, cfg.seed, Path::new(out))
        .map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "wrote {} images ({}x{}x{}) with class+orientation labels to {out}",
        ds.len(),
        ds.height,
        ds.width,
        ds.channels
    );
    Ok(())
}

fn parse_or<T: std::str::FromStr>(args: &Args, name: &str, default: T) -> Result<T, CliError> {
    match args.get(name) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| usage(format!("bad --{name} `{v}`"))),
    }
}

fn load_data(args: &Args, cfg: &Config) -> Result<data::Dataset, CliError> {
    let path = args.get("data").map(str::to_string).unwrap_or_else(|| cfg.data_path.clone());
    data::read_dataset(Path::new(&path)).map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_pretrain<S: Scalar>(args: &Args, cfg: &Config, out_dir: &Path) -> Result<(), CliError> {
    let ds = load_data(args, cfg)?;
    let mut trainer = match args.get("resume") {
        Some(ckpt) => Trainer::<S>::resume(cfg.clone(), Path::new(ckpt))
            .map_err(|e| CliError::Config(e.to_string()))?,
        None => Trainer::<S>::new(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?,
    };
    let final_path = trainer.run(&ds, out_dir).map_err(runtime)?;
    println!("final checkpoint: {}", final_path.display());
    println!("metrics: {}", out_dir.join("metrics.csv").display());
    Ok(())
}

fn build_label_probe<S: Scalar>(
    trainer: &Trainer<S>,
    ds: &data::Dataset,
    args: &Args,
) -> Result<ProbeDataset, CliError> {
    let label = args.get("label").unwrap_or("class");
    let depth = trainer.cfg.model.depth;
    let layer = parse_or(args, "layer", depth)?;
    let repr = match args.get("repr").unwrap_or(if label == "class" {
        "cls"
    } else {
        "tokens"
    }) {
        "cls" => ReprKind::ClsConcat,
        "tokens" => ReprKind::TokensFlat(layer),
        "pooled" => ReprKind::TokensPooled(layer),
        other => return Err(usage(format!("bad --repr `{other}`"))),
    };
    let features = extract_features(trainer, ds, repr).map_err(runtime)?;
    let (labels, classes): (Vec<usize>, usize) = match label {
        "class" => (
            (0..ds.len()).map(|i| ds.class_of(i)).collect(),
            ds.labels.iter().map(|l| l[0]).max().unwrap() as usize + 1,
        ),
        "orientation" => ((0..ds.len()).map(|i| ds.orientation_of(i)).collect(), 4),
        other => return Err(usage(format!("bad --label `{other}`"))),
    };
    ProbeDataset::new(
        features,
        labels,
        classes,
        trainer.cfg.seed,
        format!("{label}/{}", repr.describe()),
    )
    .map_err(runtime)
}

fn cmd_probe<S: Scalar>(args: &Args, ckpt: &Path) -> Result<(), CliError> {
    let trainer = Trainer::<S>::load(ckpt).map_err(|e| CliError::Config(e.to_string()))?;
    let ds = load_data(args, &trainer.cfg)?;
    let kind = args.get("kind").ok_or_else(|| usage("--kind is required"))?;
    if let Some(dump) = args.get("dump-features") {
        // frozen features as a single SERT tensor [n, d]
        let pd = build_label_probe(&trainer, &ds, args)?;
        let d = pd.dim();
        let flat: Vec<f64> = pd.features.iter().flatten().copied().collect();
        let t = softequiv::tensor::io::RawTensor::new(vec![pd.features.len(), d], flat);
        softequiv::tensor::io::write_tensor_file(Path::new(dump), &t)
            .map_err(|e| runtime(e.to_string()))?;
        println!("# wrote features [{} x {d}] to {dump}", pd.features.len());
    }
    println!("kind,provenance,metric,value");
    match kind {
        "linear" | "mlp" => {
            let pd = build_label_probe(&trainer, &ds, args)?;
            let res = if kind == "linear" {
                linear_probe(&pd, 50, 0.5).map_err(runtime)?
            } else {
                let hidden = parse_or(args, "hidden", 64)?;
                mlp_probe(&pd, hidden, 50, 0.5).map_err(runtime)?
            };
            println!("{kind},{},top1,{:.4}", pd.provenance, res.top1);
            if let Some(t5) = res.top5 {
                println!("{kind},{},top5,{:.4}", pd.provenance, t5);
            }
        }
        "knn" => {
            let pd = build_label_probe(&trainer, &ds, args)?;
            let k = parse_or(args, "k", default_knn_k(pd.train_idx.len()))?;
            let acc = knn_probe(&pd, k).map_err(runtime)?;
            println!("knn,{} (k={k}),top1,{acc:.4}", pd.provenance);
        }
        "transform" => {
            let task = TransformTask::parse(args.get("task").unwrap_or("rotation4"))
                .ok_or_else(|| usage("bad --task"))?;
            let layer = parse_or(args, "layer", trainer.cfg.model.depth)?;
            let acc =
                transform_probe(&trainer, &ds, task, layer, trainer.cfg.seed).map_err(runtime)?;
            println!("transform,{}@{layer},top1,{acc:.4}", task.name());
        }
        "scatter" => {
            // 2-D principal-component projection for external plotting
            let pd = build_label_probe(&trainer, &ds, args)?;
            let points = eval::pca_scatter(&pd.features);
            let out = args
                .get("scatter-out")
                .map(str::to_string)
                .unwrap_or_else(|| "scatter.csv".into());
            let mut body = String::from("x,y,class,orientation\n");
            for (i, (x, y)) in points.iter().enumerate() {
                body.push_str(&format!(
                    "{x:.6},{y:.6},{},{}\n",
                    ds.class_of(i),
                    ds.orientation_of(i)
                ));
            }
            std::fs::write(&out, body).map_err(|e| runtime(format!("{out}: {e}")))?;
            println!("scatter,{},points,{}", pd.provenance, points.len());
            println!("# wrote {out}");
        }
        other => return Err(usage(format!("bad --kind `{other}`"))),
    }
    Ok(())
}

fn cmd_equiscore<S: Scalar>(args: &Args, ckpt: &Path) -> Result<(), CliError> {
    let trainer = Trainer::<S>::load(ckpt).map_err(|e| CliError::Config(e.to_string()))?;
    let ds = load_data(args, &trainer.cfg)?;
    let layer = parse_or(args, "layer", trainer.cfg.model.depth)?;
    let samples = parse_or(args, "samples", 200)?;
    let families: Vec<Family> = match args.get("family") {
        Some(f) => vec![Family::parse(f).ok_or_else(|| usage(format!("bad --family `{f}`")))?],
        None => vec![Family::Rot90, Family::Hflip, Family::Scale],
    };
    println!("# {}", eval::SCORE_NOTE);
    println!("family,layer,samples,score");
    for family in families {
        match equivariance_score(&trainer, &ds, family, layer, samples, trainer.cfg.seed) {
            Ok(s) => println!("{},{layer},{samples},{s:.4}", family.name()),
            Err(e) => return Err(CliError::Config(e.to_string())),
        }
    }
    Ok(())
}

fn cmd_ablate<S: Scalar>(args: &Args, cfg: &Config, out_dir: &Path) -> Result<(), CliError> {
    let axis = SweepAxis::parse(args.get("axis").ok_or_else(|| usage("--axis is required"))?)
        .ok_or_else(|| usage("bad --axis"))?;
    let values: Vec<String> = args
        .get("values")
        .ok_or_else(|| usage("--values is required"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let seeds: Vec<u64> = args
        .get("seeds")
        .ok_or_else(|| usage("--seeds is required"))?
        .split(',')
        .map(|s| s.parse().map_err(|_| usage(format!("bad seed `{s}`"))))
        .collect::<Result<_, _>>()?;
    let ds = load_data(args, cfg)?;
    let samples = parse_or(args, "samples", 200)?;
    std::fs::create_dir_all(out_dir).map_err(|e| runtime(format!("{}: {e}", out_dir.display())))?;
    let rows = ablation_sweep::<S>(cfg, axis, &values, &seeds, &ds, out_dir, samples)
        .map_err(runtime)?;
    let csv_path = out_dir.join(format!("ablate_{}.csv", axis.name()));
    let mut body = String::from(SWEEP_CSV_HEADER);
    body.push('\n');
    println!("{SWEEP_CSV_HEADER}");
    for row in &rows {
        let line = row.to_csv();
        println!("{line}");
        body.push_str(&line);
        body.push('\n');
    }
    std::fs::write(&csv_path, body).map_err(|e| runtime(format!("{}: {e}", csv_path.display())))?;
    println!("# wrote {}", csv_path.display());
    Ok(())
}

fn cmd_flops(args: &Args, cfg: &Config) -> Result<(), CliError> {
    let mut cm = match args.get("preset").unwrap_or("desk") {
        "desk" => CostModel::from_config(cfg),
        "vit-s16" => CostModel::vit_s16(),
        other => return Err(usage(format!("bad --preset `{other}`"))),
    };
    if let Some(r) = args.get("r") {
        cm.r = r.parse().map_err(|_| usage(format!("bad --r `{r}`")))?;
    }
    let with = cm.estimate(true);
    let without = cm.estimate(false);
    println!("variant,per_image_flops,ratio");
    println!("baseline,{:.4e},1.0", without.per_image);
    println!("regularized,{:.4e},{:.4}", with.per_image, with.ratio);
    Ok(())
}

fn cmd_check() -> Result<(), CliError> {
    let (reports, ok) = softequiv::check::run_all();
    for r in &reports {
        println!(
            "{:<20} {:>7.2}s  {}  {}",
            r.name,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Runtime("one or more check suites failed".into()))
    }
}
