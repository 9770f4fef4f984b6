//! Experiment dispatch and result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mziforge::experiments::{
    aggregated_accuracy_loss, per_mzi_rvd, run_exp1, run_exp2, run_exp3, run_loss_sweep, run_quant_sweep, search_pstar,
    simulated_accuracy_loss, LayerSelector, SigmaMode, SweepResult, DEFAULT_N_P,
};
use mziforge::imperfect::QuantMode;
use mziforge::mesh::{clements_decompose, mesh_to_unitary, rvd};
use mziforge::network::{
    build_deep_toy_classifier, build_model, build_teacher_classifier, evaluate_accuracy, train_finite_difference,
    Dataset, DatasetFile, IpnnModel, WeightFile,
};
use mziforge::ComplexMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Config, Experiment, ModelSource, DEFAULT_LEARNING_RATE, DEFAULT_N_MC, DEFAULT_STEPS};
use crate::io::{read_json, read_unitary};

/// Files written into the output directory, in order.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        self.text(name, &body)
    }
}

fn load_model(cfg: &Config) -> Result<(IpnnModel, Dataset)> {
    match cfg.model.as_ref().expect("validated") {
        ModelSource::Toy { classes, depth } => Ok(build_deep_toy_classifier(*classes, *depth)?),
        ModelSource::Teacher {
            classes,
            depth,
            samples,
            seed,
        } => Ok(build_teacher_classifier(*classes, *depth, *samples, *seed)?),
        ModelSource::Weights { path } => {
            let weights: WeightFile = read_json(path)?;
            let model = build_model(&weights.to_matrices()?)?;
            let data = load_dataset(cfg.dataset.as_ref().expect("validated"))?;
            Ok((model, data))
        }
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let file: DatasetFile = read_json(path)?;
    Ok(file.to_dataset()?)
}

fn sweep_outputs(out: &mut Outputs, cfg: &Config, result: &SweepResult) -> Result<String> {
    let name = cfg.experiment.name();
    out.text(&format!("{name}.csv"), &result.to_csv())?;
    out.json(&format!("{name}.json"), &json!({ "config": cfg, "result": result }))?;
    Ok(format!(
        "{} rows, nominal accuracy {}",
        result.rows.len(),
        result.nominal_accuracy()
    ))
}

/// Runs one configured experiment and returns a one-line summary.
pub fn execute(cfg: &Config) -> Result<String> {
    let start = Instant::now();
    let mut out = Outputs::new(&cfg.output_dir)?;
    let n_mc = cfg.n_mc.unwrap_or(DEFAULT_N_MC);
    let n_p = cfg.n_p.unwrap_or(DEFAULT_N_P);
    let seed = cfg.seed;
    let mode = cfg.mode.unwrap_or(SigmaMode::Phs);
    let layers = cfg.layers.unwrap_or(LayerSelector::All);
    let name = cfg.experiment.name();

    let summary = match cfg.experiment {
        Experiment::Exp1 => {
            let (model, data) = load_model(cfg)?;
            let r = run_exp1(&model, &data, cfg.sigmas.as_deref().unwrap(), mode, n_mc, seed)?;
            sweep_outputs(&mut out, cfg, &r)?
        }
        Experiment::Exp3 => {
            let (model, data) = load_model(cfg)?;
            let r = run_exp3(
                &model,
                &data,
                cfg.sigmas.as_deref().unwrap(),
                cfg.corr_lens.as_deref().unwrap(),
                cfg.radial.unwrap_or(false),
                mode,
                n_mc,
                seed,
            )?;
            sweep_outputs(&mut out, cfg, &r)?
        }
        Experiment::Loss => {
            let (model, data) = load_model(cfg)?;
            let r = run_loss_sweep(
                &model,
                &data,
                cfg.mu_il.as_deref().unwrap(),
                cfg.sigma_il.as_deref().unwrap(),
                layers,
                n_mc,
                seed,
            )?;
            sweep_outputs(&mut out, cfg, &r)?
        }
        Experiment::Quant => {
            let (model, data) = load_model(cfg)?;
            let modes = cfg
                .modes
                .clone()
                .unwrap_or_else(|| vec![QuantMode::Evs, QuantMode::Eps, QuantMode::Kc]);
            let r = run_quant_sweep(&model, &data, &modes, cfg.n_bits.as_deref().unwrap(), layers)?;
            sweep_outputs(&mut out, cfg, &r)?
        }
        Experiment::Exp2 => {
            let (model, data) = load_model(cfg)?;
            let maps = run_exp2(&model, &data, cfg.sigma_in.unwrap(), cfg.sigma_out.unwrap(), n_mc, seed)?;
            for h in &maps {
                out.text(&format!("exp2_mesh{}.csv", h.mesh), &h.to_csv())?;
                out.text(&format!("exp2_mesh{}.svg", h.mesh), &h.to_svg())?;
            }
            out.json("exp2.json", &json!({ "config": cfg, "result": maps }))?;
            format!("{} heatmaps", maps.len())
        }
        Experiment::Rvd => {
            let u = read_unitary(cfg.unitary.as_ref().unwrap())?;
            let sens = per_mzi_rvd(
                &u,
                cfg.sigma_phs.unwrap_or(0.0),
                cfg.sigma_bes.unwrap_or(0.0),
                n_mc,
                seed,
            )?;
            let mut csv = String::from("layer,top_mode,mean_rvd\n");
            for s in &sens {
                csv.push_str(&format!("{},{},{}\n", s.layer, s.top_mode, s.mean_rvd));
            }
            out.text("rvd.csv", &csv)?;
            out.json("rvd.json", &json!({ "config": cfg, "result": sens }))?;
            format!("{} MZIs", sens.len())
        }
        Experiment::Sal => {
            let (model, data) = load_model(cfg)?;
            let rep = simulated_accuracy_loss(&model, &data, cfg.params.as_ref().unwrap(), n_p, seed)?;
            out.text(
                "sal.csv",
                &format!(
                    "nominal,mean,std,sal,n_p,seed\n{},{},{},{},{},{}\n",
                    rep.nominal_accuracy, rep.mean_accuracy, rep.std_accuracy, rep.sal, rep.n_p, rep.seed
                ),
            )?;
            out.json("sal.json", &json!({ "config": cfg, "result": rep }))?;
            format!("SAL {}", rep.sal)
        }
        Experiment::Aal => {
            let (model, data) = load_model(cfg)?;
            let rep = aggregated_accuracy_loss(&model, &data, cfg.params.as_ref().unwrap(), n_p, seed)?;
            let mut csv = String::from("term,sal,mean,std,n_p,seed\n");
            for (label, t) in ["sigma_phs", "sigma_bes", "corr_len", "sigma_il", "n_bits"]
                .iter()
                .zip(&rep.terms)
            {
                csv.push_str(&format!(
                    "{label},{},{},{},{},{}\n",
                    t.sal, t.mean_accuracy, t.std_accuracy, t.n_p, t.seed
                ));
            }
            out.text("aal.csv", &csv)?;
            out.json("aal.json", &json!({ "config": cfg, "result": rep }))?;
            format!("AAL {}", rep.aal)
        }
        Experiment::Pstar => {
            let (model, data) = load_model(cfg)?;
            let template = cfg.params.clone().unwrap_or_default();
            let res = search_pstar(
                &model,
                &data,
                cfg.grid.as_ref().unwrap(),
                &template,
                cfg.alpha_max.unwrap(),
                n_p,
                seed,
            )?;
            let mut csv = String::from("sigma_phs,sigma_bes,corr_len,sigma_il,n_bits,sal\n");
            for pt in &res.pareto {
                let p = &pt.p;
                let bits = p.n_bits.map_or_else(|| "full".to_string(), |b| b.to_string());
                csv.push_str(&format!(
                    "{},{},{},{},{bits},{}\n",
                    p.sigma_phs, p.sigma_bes, p.corr_len, p.sigma_il, pt.sal
                ));
            }
            out.text("pstar.csv", &csv)?;
            out.json("pstar.json", &json!({ "config": cfg, "result": res }))?;
            format!(
                "{} Pareto points of {} evaluated",
                res.pareto.len(),
                res.evaluated.len()
            )
        }
        Experiment::ToyTrain => {
            let data = match &cfg.dataset {
                Some(path) => load_dataset(path)?,
                None => load_model(cfg)?.1,
            };
            let report = train_finite_difference(
                cfg.shapes.as_deref().unwrap(),
                &data,
                cfg.steps.unwrap_or(DEFAULT_STEPS),
                cfg.learning_rate.unwrap_or(DEFAULT_LEARNING_RATE),
                seed,
            )?;
            let accuracy = evaluate_accuracy(&report.model, &data)?;
            let weights: Vec<ComplexMatrix> = report.model.layers.iter().map(|l| l.matrix()).collect();
            out.json("weights.json", &WeightFile::from_matrices(&weights))?;
            out.json("model.json", &report.model)?;
            let summary = json!({
                "initial_loss": report.initial_loss,
                "final_loss": report.final_loss,
                "steps_taken": report.steps_taken,
                "train_accuracy": accuracy,
            });
            out.json("toy-train.json", &json!({ "config": cfg, "result": summary }))?;
            format!(
                "loss {} -> {}, accuracy {accuracy}",
                report.initial_loss, report.final_loss
            )
        }
        Experiment::Decompose => {
            let u = read_unitary(cfg.unitary.as_ref().unwrap())?;
            let plan = clements_decompose(&u, mziforge::network::DECOMPOSE_TOLERANCE)?;
            let err = rvd(&mesh_to_unitary(&plan), &u)?;
            out.json("plan.json", &plan)?;
            out.json(
                "decompose.json",
                &json!({ "config": cfg, "result": { "nodes": plan.nodes.len(), "rvd": err } }),
            )?;
            format!("{} MZIs, rebuild RVD {err:e}", plan.nodes.len())
        }
    };

    let mut files: Vec<Value> = out.written.iter().map(|f| Value::from(f.as_str())).collect();
    files.push("manifest.json".into());
    let manifest = json!({
        "tool": "mziforge",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": name,
        "seed": seed,
        "threads": rayon::current_num_threads(),
        "wall_time_s": start.elapsed().as_secs_f64(),
        "files": files,
        "config": cfg,
    });
    out.json("manifest.json", &manifest)?;
    Ok(format!("{name}: {summary}"))
}
