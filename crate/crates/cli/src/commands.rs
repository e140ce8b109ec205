use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use ibp_core::attack::empirical_error;
use ibp_core::network::io::Checkpoint;
use ibp_core::network::{init_parameters, parse_architecture};
use ibp_core::training::{TrainConfig, Trainer};
use ibp_core::verify::{pgd_gap_hunt, polytope_sample, verified_error};
use ibp_core::{Dataset, Network, Rng, Tensor};

use crate::config::{self, Effective, FileConfig};
use crate::{Command, Common};

pub fn run(command: &Command, common: &Common) -> Result<()> {
    let name = match command {
        Command::Train { .. } => "train",
        Command::Eval => "eval",
        Command::Attack => "attack",
        Command::Verify => "verify",
        Command::Tightness => "tightness",
        Command::Polytope => "polytope",
        Command::Hunt => "hunt",
        Command::Export { .. } => "export",
    };
    let file = match &common.config {
        Some(p) => FileConfig::read(p)?,
        None => FileConfig::default(),
    };
    let model = match (name, common.model.first()) {
        ("train", _) | (_, None) => None,
        (_, Some(p)) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
    };
    let model_epsilon = model.as_ref().and_then(trained_epsilon);
    let eff = config::resolve(name, file, &common.overrides(), model_epsilon)?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write_json(&common.out.join("config.json"), &eff)?;

    match command {
        Command::Train { checkpoint_every } => train(&eff, common, *checkpoint_every),
        Command::Export { weights_csv } => export(require(model)?, &common.out, *weights_csv),
        Command::Polytope => polytope(&eff, common),
        _ => {
            let model = require(model)?;
            let ds = examples(&eff)?;
            match command {
                Command::Eval => eval(&model.network, &ds, &common.out),
                Command::Attack => attack(&eff, &model.network, &ds, &common.out),
                Command::Verify => verify(&eff, &model.network, &ds, &common.out),
                Command::Tightness => tightness(&eff, &model.network, &ds, &common.out),
                Command::Hunt => hunt(&eff, &model.network, &ds, &common.out),
                _ => unreachable!("handled above"),
            }
        }
    }
}

fn require(model: Option<Checkpoint>) -> Result<Checkpoint> {
    model.context("this command needs --model PATH")
}

/// The evaluation ε stored with a trained model, if any.
fn trained_epsilon(ckpt: &Checkpoint) -> Option<f64> {
    let cfg: TrainConfig = serde_json::from_value(ckpt.training.as_ref()?.get("config")?.clone()).ok()?;
    Some(cfg.eval_epsilon())
}

fn examples(eff: &Effective) -> Result<Dataset> {
    let ds = eff.dataset.load(eff.split)?;
    Ok(match eff.examples {
        Some(n) => ds.take(n.min(ds.len())),
        None => ds,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn train(eff: &Effective, common: &Common, checkpoint_every: Option<usize>) -> Result<()> {
    let train_ds = eff.dataset.load(config::Split::Train)?;
    let eval_ds = if eff.dataset.is_toy() {
        train_ds.clone()
    } else {
        eff.dataset.load(config::Split::Test)?
    };
    let (net, state) = match common.model.first() {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let state = Trainer::state_from_checkpoint(&ckpt)?;
            (ckpt.network, Some(state))
        }
        None => {
            let shape = train_ds.input_shape().to_vec();
            let arch = parse_architecture(&eff.arch, &shape)?;
            (init_parameters(&arch, &mut Rng::new(eff.seed)), None)
        }
    };
    let resumed = state.is_some();
    let mut trainer = match state {
        Some(s) => Trainer::resume(net, &train_ds, &eval_ds, eff.train.clone(), s)?,
        None => Trainer::new(net, &train_ds, &eval_ds, eff.train.clone())?,
    };

    let ckpt_dir = common.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let save_at = |t: &Trainer, dir: &Path| -> Result<()> {
        let path = dir.join(format!("step-{:06}.json", t.state().step));
        t.checkpoint(Some(&eff.arch)).save(&path)?;
        Ok(())
    };
    if !resumed {
        save_at(&trainer, &ckpt_dir)?;
    }
    let metrics_path = common.out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(if resumed {
        fs::OpenOptions::new().append(true).create(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    });
    let total = eff.train.schedule.total_steps;
    while trainer.state().step <= total {
        let before = trainer.state().step;
        if let Some(r) = trainer.step()? {
            serde_json::to_writer(&mut metrics, &r)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
        }
        if before < total {
            if let Some(every) = checkpoint_every.filter(|&e| e > 0) {
                if trainer.state().step % every == 0 && trainer.state().step < total {
                    save_at(&trainer, &ckpt_dir)?;
                }
            }
        }
    }
    let ckpt = trainer.checkpoint(Some(&eff.arch));
    ckpt.save(&ckpt_dir.join(format!("step-{total:06}.json")))?;
    ckpt.save(&common.out.join("model.json"))?;
    Ok(())
}

fn eval(net: &Network, ds: &Dataset, out: &Path) -> Result<()> {
    let pred = net.predict(ds.inputs())?;
    let wrong = pred.iter().zip(ds.labels()).filter(|(p, y)| p != y).count();
    write_json(
        &out.join("eval.json"),
        &json!({ "nominal_err": wrong as f64 / ds.len() as f64, "count": ds.len() }),
    )
}

fn attack(eff: &Effective, net: &Network, ds: &Dataset, out: &Path) -> Result<()> {
    let report = empirical_error(net, ds, &eff.attack)?;
    jsonl(&out.join("attack.jsonl"), &report.records)?;
    write_json(
        &out.join("attack_summary.json"),
        &json!({ "epsilon": eff.epsilon, "pgd_rate": report.rate, "count": ds.len() }),
    )
}

fn verify(eff: &Effective, net: &Network, ds: &Dataset, out: &Path) -> Result<()> {
    let report = verified_error(net, ds, eff.epsilon, &eff.attack, &eff.bab)?;
    jsonl(&out.join("verify.jsonl"), &report.records)?;
    let counterexamples: Vec<_> = report
        .counterexamples
        .iter()
        .map(|(i, x)| json!({ "index": i, "input": x.data() }))
        .collect();
    jsonl(&out.join("counterexamples.jsonl"), counterexamples)?;
    let r = report.rates;
    write_json(
        &out.join("verify_summary.json"),
        &json!({
            "epsilon": eff.epsilon,
            "count": r.count,
            "nominal_rate": r.nominal_rate,
            "pgd_rate": r.pgd_rate,
            "bab_rate": r.bab_rate,
            "ibp_rate": r.ibp_rate,
        }),
    )
}

fn tightness(eff: &Effective, net: &Network, ds: &Dataset, out: &Path) -> Result<()> {
    let report = verified_error(net, ds, eff.epsilon, &eff.attack, &eff.bab)?;
    let r = report.rates;
    let unknown = report.records.iter().filter(|x| x.status == "unknown").count();
    write_json(
        &out.join("tightness.json"),
        &json!({
            "epsilon": eff.epsilon,
            "count": r.count,
            "nominal_rate": r.nominal_rate,
            "pgd_rate": r.pgd_rate,
            "complete_rate": r.bab_rate,
            "ibp_rate": r.ibp_rate,
            "ibp_minus_complete": r.ibp_rate - r.bab_rate,
            "unknown": unknown,
        }),
    )
}

fn polytope(eff: &Effective, common: &Common) -> Result<()> {
    if common.model.is_empty() {
        bail!("polytope needs at least one --model PATH");
    }
    let ds = examples(eff)?;
    let opts = &eff.polytope;
    let index = match opts.index {
        Some(i) if i < ds.len() => i,
        Some(i) => bail!("example index {i} out of range for {} examples", ds.len()),
        None => ds.labels().iter().position(|&y| y == 1).unwrap_or(0),
    };
    let x = ds.example(index);
    let mut rows = String::from("u,v,layer,checkpoint\n");
    let mut boxes = Vec::new();
    for path in &common.model {
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let net = &ckpt.network;
        let layer = opts.layer.unwrap_or(net.layers().len() - 1);
        let projection = match &opts.projection {
            Some(rows) => {
                let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                Some(Tensor::matrix(&refs)?)
            }
            None => None,
        };
        let domain = eff.bab.domain_clip.map(|[lo, hi]| (lo, hi));
        let s = polytope_sample(net, &x, eff.epsilon, opts.samples_per_axis, layer, projection.as_ref(), domain)?;
        let label = checkpoint_label(path);
        for p in &s.points {
            rows.push_str(&format!("{},{},{},{}\n", p[0], p[1], layer, label));
        }
        boxes.push(json!({
            "checkpoint": label,
            "path": path,
            "layer": layer,
            "index": index,
            "epsilon": eff.epsilon,
            "lower": s.box_lower,
            "upper": s.box_upper,
            "area": s.box_area(),
            "points_inside": s.contained(0.0),
        }));
    }
    fs::write(common.out.join("polytope.csv"), rows)?;
    write_json(&common.out.join("polytope_boxes.json"), &boxes)
}

fn checkpoint_label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn hunt(eff: &Effective, net: &Network, ds: &Dataset, out: &Path) -> Result<()> {
    let found = pgd_gap_hunt(net, ds, eff.epsilon, &eff.attack, &eff.bab)?;
    let rows: Vec<_> = found
        .iter()
        .map(|f| {
            json!({
                "index": f.index,
                "pgd": f.attack,
                "counterexample": f.counterexample.data(),
                "counterexample_class": f.counterexample_class,
                "linf_distance": f.linf_distance,
                "nodes": f.nodes,
            })
        })
        .collect();
    jsonl(&out.join("hunt.jsonl"), rows)
}

fn export(ckpt: Checkpoint, out: &Path, weights_csv: bool) -> Result<()> {
    ckpt.save(&out.join("model.json"))?;
    if !weights_csv {
        return Ok(());
    }
    let dir: PathBuf = out.join("weights");
    fs::create_dir_all(&dir)?;
    for (i, layer) in ckpt.network.layers().iter().enumerate() {
        let Some((w, b)) = layer.params() else { continue };
        let rows = w.shape()[0];
        let cols = w.len() / rows;
        let mut text = String::new();
        for r in 0..rows {
            let line: Vec<String> = w.data()[r * cols..(r + 1) * cols].iter().map(f64::to_string).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        fs::write(dir.join(format!("layer{i}_{}_weight.csv", layer.kind())), text)?;
        let bias: Vec<String> = b.data().iter().map(f64::to_string).collect();
        fs::write(dir.join(format!("layer{i}_{}_bias.csv", layer.kind())), bias.join("\n") + "\n")?;
    }
    Ok(())
}
