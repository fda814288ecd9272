use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ctm_core::ctm::ctm_param_count;
use ctm_core::diagnostics::{
    bench_shape, gradcheck, identity_check, oracle_check, parse_shapes, GradTarget, BENCH_CSV_HEADER,
    ORACLE_TOL,
};
use ctm_core::network::{build_network, load_checkpoint, save_checkpoint, NetworkConfig, Unit};
use ctm_core::params::count_params;
use ctm_core::train::{
    evaluate, read_split, run_ablation, train, write_dataset, AblationMatrix, SyntheticSpec, TrainConfig,
    ABLATION_CSV_HEADER, TRAIN_FILE, VAL_FILE,
};
use ctm_core::Rng;

#[derive(Parser)]
#[command(name = "ctm", version, about = "CTM block / TCC operator toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks.
    Gradcheck {
        /// tcc, conv1x1, bn, tconv, block or net; all when omitted.
        #[arg(long)]
        module: Option<GradTarget>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fast vs naive TCC over the reference shape grid.
    OracleCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fresh CTM blocks and networks reproduce their input / baseline.
    IdentityCheck {
        #[arg(long, default_value_t = 100)]
        blocks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Times naive and fast TCC on the shapes listed in FILE.
    Bench {
        #[arg(long)]
        shapes: PathBuf,
        #[arg(long, default_value_t = ctm_core::diagnostics::BENCH_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes train.ctmdata and val.ctmdata for a synthetic spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a network; writes best.ckpt, final.ckpt and train_log.csv to OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optimizer settings; defaults when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
    },
    /// Validation top-1 of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Runs an ablation matrix and prints the result table.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Parameter breakdown of a network config.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_network_config(path: &Path) -> Result<NetworkConfig> {
    let cfg: NetworkConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_gradcheck(module: Option<GradTarget>, seed: u64) -> Result<bool> {
    let targets = module.map_or(GradTarget::ALL.to_vec(), |m| vec![m]);
    let mut rng = Rng::new(seed);
    let mut all_ok = true;
    println!("module,tensor,checked,kinks,max_rel_err,tolerance,status");
    for target in targets {
        for rep in gradcheck(target, &mut rng)? {
            let ok = rep.passes(target.tolerance());
            all_ok &= ok;
            println!(
                "{target},{},{},{},{:.3e},{:.0e},{}",
                rep.name,
                rep.checked,
                rep.kinks,
                rep.max_rel_err,
                target.tolerance(),
                pass(ok)
            );
        }
    }
    Ok(all_ok)
}

fn cmd_oracle(trials: usize, seed: u64) -> Result<bool> {
    let rows = oracle_check(trials, &mut Rng::new(seed))?;
    println!("n,t,c,h,w,trials,max_abs_diff,status");
    let mut all_ok = true;
    for r in rows {
        let ok = r.max_abs_diff < ORACLE_TOL;
        all_ok &= ok;
        let [n, t, c, h, w] = r.shape;
        println!("{n},{t},{c},{h},{w},{},{:.3e},{}", r.trials, r.max_abs_diff, pass(ok));
    }
    Ok(all_ok)
}

fn cmd_identity(blocks: usize, seed: u64) -> Result<bool> {
    let r = identity_check(blocks, &mut Rng::new(seed))?;
    let checks = [
        ("block_eval_max_abs_diff", r.max_eval_diff, r.max_eval_diff == 0.0),
        ("block_train_max_abs_diff", r.max_train_diff, r.max_train_diff < 1e-12),
        ("network_loss_diff", r.loss_diff, r.loss_diff < 1e-10),
    ];
    println!("check,value,status");
    for (name, v, ok) in checks {
        println!("{name},{v:.3e},{}", pass(ok));
    }
    Ok(checks.iter().all(|c| c.2))
}

fn cmd_bench(path: &Path, runs: usize, seed: u64) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let shapes = parse_shapes(&text)?;
    if shapes.is_empty() {
        bail!("{} lists no shapes", path.display());
    }
    let mut rng = Rng::new(seed);
    println!("{BENCH_CSV_HEADER}");
    for s in shapes {
        for row in bench_shape(s, runs, &mut rng)? {
            println!("{}", row.csv_line());
        }
    }
    Ok(true)
}

fn cmd_gen_data(spec: &Path, out: &Path) -> Result<bool> {
    let spec: SyntheticSpec = read_json(spec)?;
    let (train_set, val_set) = write_dataset(&spec, out)?;
    println!("split,clips,path");
    println!("train,{},{}", train_set.len(), out.join(TRAIN_FILE).display());
    println!("val,{},{}", val_set.len(), out.join(VAL_FILE).display());
    Ok(true)
}

fn cmd_train(config: &Path, data: &Path, out: &Path, train_config: Option<&Path>) -> Result<bool> {
    let cfg = read_network_config(config)?;
    let tc: TrainConfig = match train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let (train_set, _) = read_split(data.join(TRAIN_FILE))?;
    let (val_set, _) = read_split(data.join(VAL_FILE))?;
    let mut net = build_network(&cfg, &mut Rng::new(tc.seed))?;
    let log = train(&mut net, &train_set, &val_set, &tc, Some(out))?;
    save_checkpoint(&net, out.join("final.ckpt"))?;
    print!("{}", log.to_csv());
    eprintln!("best val top-1 {:.4} at epoch {}", log.best_val_top1, log.best_epoch);
    Ok(true)
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<bool> {
    let net = load_checkpoint(checkpoint)?;
    let path = if data.is_dir() { data.join(VAL_FILE) } else { data.to_path_buf() };
    let (set, _) = read_split(&path)?;
    let acc = evaluate(&net, &set)?;
    println!("data,clips,val_top1");
    println!("{},{},{acc:.4}", path.display(), set.len());
    Ok(true)
}

fn cmd_ablate(matrix: &Path) -> Result<bool> {
    let matrix: AblationMatrix = read_json(matrix)?;
    let rows = run_ablation(&matrix, &mut |msg| eprintln!("{msg}"))?;
    println!("{ABLATION_CSV_HEADER}");
    for row in rows {
        println!("{}", row.csv_line());
    }
    Ok(true)
}

fn cmd_params(config: &Path) -> Result<bool> {
    let cfg = read_network_config(config)?;
    let net = build_network(&cfg, &mut Rng::new(0))?;
    println!("component,params,closed_form");
    println!("stem,{},", count_params(&net.stem_conv) + count_params(&net.stem_bn));
    for (name, unit) in &net.units {
        match unit {
            Unit::Bottleneck(b) => println!("{name},{},", count_params(b)),
            Unit::Ctm(b) => {
                let c1 = b.channels().unwrap_or(0);
                let (h, w) = b.spatial_extent().unwrap_or((0, 0));
                let closed = ctm_param_count(c1, c1 / cfg.ctm_reduction, h, w, cfg.ctm_variant);
                println!("{name},{},{closed}", count_params(b));
            }
        }
    }
    println!("head,{},", count_params(&net.head));
    println!("total,{},{}", count_params(&net), cfg.param_count());
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck { module, seed } => cmd_gradcheck(module, seed),
        Command::OracleCheck { trials, seed } => cmd_oracle(trials, seed),
        Command::IdentityCheck { blocks, seed } => cmd_identity(blocks, seed),
        Command::Bench { shapes, runs, seed } => cmd_bench(&shapes, runs, seed),
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Command::Train {
            config,
            data,
            out,
            train_config,
        } => cmd_train(&config, &data, &out, train_config.as_deref()),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Ablate { matrix } => cmd_ablate(&matrix),
        Command::Params { config } => cmd_params(&config),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
