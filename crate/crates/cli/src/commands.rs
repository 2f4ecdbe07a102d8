use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use metanode::analysis::{self, Method};
use metanode::episodes::{load_features, synth_dataset, FeatureDataset, Split};
use metanode::gradnet::{read_checkpoint, write_checkpoint};
use metanode::metatrain::{log_to_csv, train_with, EpochRecord};
use metanode::{GradNetConfig, GradNetParams};

use crate::config::{MethodName, RunConfig};
use crate::output::{config_path, with_suffix, Outputs};
use crate::{AnalyzeArgs, EvalArgs, ProtocolArgs, Report, SynthArgs, TrainArgs};

pub fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let e = &mut cfg.episodes;
    if let Some(v) = a.classes {
        e.classes = v as usize;
    }
    set(&mut e.dim, a.dim);
    set(&mut e.per_class, a.per_class);
    set(&mut e.noise, a.noise);
    set(&mut e.min_angle, a.min_angle);
    set(&mut e.seed, a.seed);
    set(&mut e.novel_classes, a.novel_classes);
    if e.classes < 2 {
        bail!("--classes must be at least 2");
    }
    if e.novel_classes > 0 && a.novel_out.is_none() {
        bail!("novel classes configured but no --novel-out given");
    }
    let all = synth_dataset(&e.synth_config())?;
    let mut out = Outputs::default();
    match &a.novel_out {
        Some(novel_path) => {
            if e.novel_classes < 2 {
                bail!("--novel-classes must be at least 2");
            }
            let (base, novel) = all.partition(e.classes, Split::Novel)?;
            out.add(&a.out, base.to_feature_text());
            out.add(novel_path, novel.to_feature_text());
        }
        None => out.add(&a.out, all.to_feature_text()),
    }
    out.add(config_path(&a.out), cfg.to_toml());
    out.commit()
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    set(&mut cfg.train.mode, a.mode);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.seed, a.seed);
    let base = load(&a.data, Split::Base)?;
    let val = a.val.as_deref().map(|p| load(p, Split::Validation)).transpose()?;
    if let Some(v) = &val {
        if v.dim() != base.dim() {
            bail!("validation features have dimension {}, training features {}", v.dim(), base.dim());
        }
    }
    cfg.gradnet.feature_dim = base.dim();
    cfg.validate()?;
    let start = std::time::Instant::now();
    let outcome = train_with(&base, val.as_ref(), &cfg.gradnet, &cfg.train, |r: &EpochRecord| {
        eprintln!("{} ({:.1}s)", r.to_csv(), start.elapsed().as_secs_f64());
    })?;
    if outcome.skipped_updates > 0 || outcome.divergences > 0 {
        eprintln!("warning: {} skipped updates, {} diverged episodes", outcome.skipped_updates, outcome.divergences);
    }
    let mut ckpt = Vec::new();
    write_checkpoint(&mut ckpt, &cfg.gradnet, &outcome.params)?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out_checkpoint, ".log.csv"));
    let mut out = Outputs::default();
    out.add(&a.out_checkpoint, ckpt);
    out.add(log_path, log_to_csv(&outcome.log));
    out.add(config_path(&a.out_checkpoint), cfg.to_toml());
    out.commit()
}

pub fn eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    set(&mut cfg.eval.method, a.method);
    apply_protocol(&mut cfg, &a.protocol);
    let ds = load(&a.data, Split::Novel)?;
    let needs_net = cfg.eval.method == MethodName::Metanode;
    let net = network(&mut cfg, a.checkpoint.as_deref(), needs_net)?;
    cfg.solver.validate()?;
    let method = method(&cfg, cfg.eval.method, net.as_ref())?;
    let report = analysis::evaluate(&ds, &cfg.eval.protocol(), &method)?;
    if let Some(path) = &a.out {
        let mut out = Outputs::default();
        out.add(path, report.to_csv());
        out.add(config_path(path), cfg.to_toml());
        out.commit()?;
    }
    print!("{}", report.summary());
    Ok(())
}

pub fn analyze(mut cfg: RunConfig, a: AnalyzeArgs) -> Result<()> {
    set(&mut cfg.eval.method, a.method);
    if let Some(t) = a.times.clone() {
        cfg.eval.times = t;
    }
    set(&mut cfg.eval.trajectory_episode, a.episode);
    apply_protocol(&mut cfg, &a.protocol);
    let ds = load(&a.data, Split::Novel)?;
    let needs_net = match a.report {
        Report::ProtoBias => cfg.eval.method == MethodName::Metanode,
        Report::GradBias => false,
        Report::Convergence | Report::Trajectory => true,
    };
    let net = network(&mut cfg, a.checkpoint.as_deref(), needs_net)?;
    cfg.solver.validate()?;
    let protocol = cfg.eval.protocol();
    let text = match a.report {
        Report::ProtoBias => {
            let b = analysis::prototype_bias(&ds, &protocol, &method(&cfg, cfg.eval.method, net.as_ref())?)?;
            format!("sim_initial,sim_optimal,episodes\n{},{},{}\n", b.sim_initial, b.sim_optimal, b.episodes)
        }
        Report::GradBias => {
            let g = analysis::gradient_bias(&ds, &protocol, net.as_ref().map(|(c, p)| (p, c)))?;
            let inferred = g.sim_inferred.map_or("nan".to_string(), |v| v.to_string());
            let mut s = String::from("sim_averaged,sim_inferred,episodes,excluded\n");
            writeln!(s, "{},{},{},{}", g.sim_averaged, inferred, g.episodes, g.excluded)?;
            s
        }
        Report::Convergence => {
            let (net_cfg, params) = net.as_ref().expect("checked");
            let points = analysis::convergence_curve(&ds, &protocol, params, net_cfg, &cfg.solver, &cfg.eval.times)?;
            analysis::convergence_csv(&points)
        }
        Report::Trajectory => {
            let (net_cfg, params) = net.as_ref().expect("checked");
            analysis::trajectory(&ds, &protocol, cfg.eval.trajectory_episode, params, net_cfg, &cfg.solver)?.to_csv()
        }
    };
    match &a.out {
        Some(path) => {
            let mut out = Outputs::default();
            out.add(path, text);
            out.add(config_path(path), cfg.to_toml());
            out.commit()
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load(path: &Path, split: Split) -> Result<FeatureDataset> {
    load_features(path, split).with_context(|| format!("loading {}", path.display()))
}

fn apply_protocol(cfg: &mut RunConfig, p: &ProtocolArgs) {
    let e = &mut cfg.eval;
    set(&mut e.n_way, p.n_way);
    set(&mut e.k_shot, p.k_shot);
    set(&mut e.m_query, p.m_query);
    set(&mut e.episodes, p.episodes);
    set(&mut e.mode, p.mode);
    set(&mut e.seed, p.seed);
    set(&mut cfg.solver.method, p.solver);
    set(&mut cfg.solver.num_steps, p.steps);
    set(&mut cfg.solver.integral_time, p.integral_time);
}

/// Loads the checkpoint when given; its network settings replace the
/// configured ones.
fn network(cfg: &mut RunConfig, path: Option<&Path>, required: bool) -> Result<Option<(GradNetConfig, GradNetParams)>> {
    match path {
        Some(p) => {
            let file = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let (net_cfg, params) =
                read_checkpoint(std::io::BufReader::new(file)).with_context(|| format!("reading {}", p.display()))?;
            cfg.gradnet = net_cfg.clone();
            Ok(Some((net_cfg, params)))
        }
        None if required => bail!("this command needs --checkpoint"),
        None => Ok(None),
    }
}

fn method<'a>(
    cfg: &'a RunConfig,
    name: MethodName,
    net: Option<&'a (GradNetConfig, GradNetParams)>,
) -> Result<Method<'a>> {
    Ok(match name {
        MethodName::Mean => Method::Mean,
        MethodName::Gda => Method::Gda { eta: cfg.eval.gda_eta, steps: cfg.eval.gda_steps },
        MethodName::Metanode => {
            let (net_cfg, params) = net.context("--method metanode needs --checkpoint")?;
            Method::MetaNode { params, net: net_cfg, solver: &cfg.solver }
        }
    })
}
