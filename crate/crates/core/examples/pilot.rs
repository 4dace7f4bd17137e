//! Small end-to-end run on synthetic data with timings and metrics.
//! Usage: pilot [config.json] where the JSON may override `model`,
//! `training`, `n_train`, `n_val`, `n_test`.

use std::time::Instant;

use audiocolor::audio::AudioFrontend;
use audiocolor::checkpoint::{CheckpointBundle, Stage};
use audiocolor::data::{generate_samples, to_samples, Split, SyntheticSceneSpec};
use audiocolor::model::ModelConfig;
use audiocolor::parallel::Execution;
use audiocolor::pipeline::{
    evaluate, evaluate_relevance, relevance_features, train_stage, AblationMode, Colorizer, StageData, TrainContext,
    TrainingConfig,
};
use serde::Deserialize;

#[derive(Deserialize)]
#[serde(default)]
struct Pilot {
    model: ModelConfig,
    training: TrainingConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    joint: bool,
    load: Option<String>,
    save: Option<String>,
    stages: Option<Vec<Stage>>,
}

impl Default for Pilot {
    fn default() -> Self {
        Self {
            model: audiocolor::pipeline::desk_model_config(),
            training: audiocolor::pipeline::desk_training_config(),
            n_train: 600,
            n_val: 120,
            n_test: 500,
            seed: 7,
            joint: false,
            load: None,
            save: None,
            stages: None,
        }
    }
}

fn main() -> audiocolor::error::Result<()> {
    let p: Pilot = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap(),
        None => Pilot::default(),
    };
    let exec = Execution::default();
    let spec = SyntheticSceneSpec::default();
    let fe = AudioFrontend::new(p.model.spectrogram.clone())?;
    let t = Instant::now();
    let train = to_samples(
        &generate_samples(&spec, Split::Train, p.n_train, p.seed, exec)?,
        &fe,
        exec,
    );
    let val = to_samples(
        &generate_samples(&spec, Split::Val, p.n_val, p.seed + 1, exec)?,
        &fe,
        exec,
    );
    let test = to_samples(
        &generate_samples(&spec, Split::Test, p.n_test, p.seed + 2, exec)?,
        &fe,
        exec,
    );
    println!("data {:.1}s", t.elapsed().as_secs_f64());
    let data = StageData {
        train: &train,
        val: &val,
    };
    let mut on_epoch = |r: &audiocolor::checkpoint::EpochRecord| {
        println!("  {} epoch {} loss {:.5} {:?}", r.stage, r.epoch, r.loss, r.metrics);
    };
    let mut bundle = p
        .load
        .as_ref()
        .map(|l| CheckpointBundle::load(std::path::Path::new(&format!("{l}.json"))).unwrap());
    let mut s1 = p
        .load
        .as_ref()
        .map(|l| CheckpointBundle::load(std::path::Path::new(&format!("{l}.s1.json"))).unwrap());
    let default_stages = if p.joint {
        vec![Stage::Joint]
    } else {
        vec![Stage::Stage1, Stage::Stage2, Stage::Rnet, Stage::Stage3]
    };
    for &stage in p.stages.as_ref().unwrap_or(&default_stages) {
        let t = Instant::now();
        let mut ctx = TrainContext {
            exec,
            on_epoch: Some(&mut on_epoch),
            checkpoint_path: None,
        };
        let b = train_stage(
            stage,
            p.model.clone(),
            data,
            p.training.for_stage(stage),
            bundle.as_ref(),
            &mut ctx,
        )?;
        println!("{stage} {:.1}s", t.elapsed().as_secs_f64());
        if stage == Stage::Stage1 {
            s1 = Some(b.clone());
        }
        bundle = Some(b);
        if let Some(sv) = &p.save {
            bundle
                .as_ref()
                .unwrap()
                .save(std::path::Path::new(&format!("{sv}.{stage}.json")))?;
            if let Some(b1) = &s1 {
                b1.save(std::path::Path::new(&format!("{sv}.{stage}.s1.json")))?;
            }
        }
    }
    let c = Colorizer::from_bundle(bundle.as_ref().unwrap())?;
    if let (false, Some(s1b)) = (p.joint, s1.as_ref()) {
        let test_refs: Vec<_> = test.iter().collect();
        if c.groups.contains(&audiocolor::model::ParamGroup::Rnet) {
            let f = relevance_features(&c.model, &test_refs, exec)?;
            let e = evaluate_relevance(&c.model, &f, 99, exec)?;
            for (name, rows) in [
                ("fa", f.audio.iter().map(|a| a.0.clone()).collect::<Vec<_>>()),
                ("fv", f.visual.clone()),
            ] {
                let d = rows[0].len();
                let n = rows.len() as f64;
                let mut line = String::new();
                for j in 0..d.min(12) {
                    let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                    let sd = (rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt();
                    line += &format!(" {m:.3}±{sd:.3}");
                }
                println!("{name} dim {d}:{line}");
            }
            println!("test rnet bce {:.4} auc {:.4}", e.bce, e.auc);
        }
        let s1c = Colorizer::from_bundle(s1b)?;
        let r = evaluate(&s1c, &test, AblationMode::MissingAudio, None, exec)?;
        println!("stage1 visual-only: {}", r.summary_line());
        let mut mse = 0.0;
        let mut hits = 0;
        for smp in &test {
            let sem = s1c.model.visual.forward(&smp.color)?;
            let c = s1c.model.cond_mlp.forward(sem.as_slice())?;
            let inf = s1c.render(
                &smp.gray,
                Some(&c),
                audiocolor::conditioning::RelevanceScore::ONE,
                AblationMode::NoR,
            )?;
            let truth = audiocolor::colorspace::rgb_to_lab(&smp.color)?.split().1;
            mse += audiocolor::pipeline::ab_mse(&inf.ab, &truth);
            hits += audiocolor::pipeline::hue_decision(&inf.ab, &truth, smp.label.as_ref().unwrap()).unwrap_or(false)
                as usize;
        }
        println!(
            "stage1 oracle-guided ab-mse {:.2} hue-acc {:.3}",
            mse / test.len() as f64,
            hits as f64 / test.len() as f64
        );
        // guidance from the mean visual semantic of the test image's class
        let mut means: std::collections::BTreeMap<(usize, usize), (Vec<f64>, usize)> = Default::default();
        for smp in &train {
            let l = smp.label.as_ref().unwrap();
            let sem = s1c.model.visual.forward(&smp.color)?.into_vec();
            let e = means.entry((l.family, l.hue)).or_insert((vec![0.0; sem.len()], 0));
            e.0.iter_mut().zip(&sem).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        let (mut mse, mut hits, mut spread, mut gap) = (0.0, 0, 0.0, 0.0);
        for smp in &test {
            let l = smp.label.as_ref().unwrap();
            let (sum, n) = &means[&(l.family, l.hue)];
            let mean: Vec<f64> = sum.iter().map(|v| v / *n as f64).collect();
            let own = s1c.model.visual.forward(&smp.color)?.into_vec();
            spread += own.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let fa = c.model.audio.forward(smp.audio.as_ref().unwrap())?;
            let fs = c.model.a2v.forward(&fa)?;
            gap += fs.0.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let cv = s1c.model.cond_mlp.forward(&mean)?;
            let inf = s1c.render(
                &smp.gray,
                Some(&cv),
                audiocolor::conditioning::RelevanceScore::ONE,
                AblationMode::NoR,
            )?;
            let truth = audiocolor::colorspace::rgb_to_lab(&smp.color)?.split().1;
            mse += audiocolor::pipeline::ab_mse(&inf.ab, &truth);
            hits += audiocolor::pipeline::hue_decision(&inf.ab, &truth, l).unwrap_or(false) as usize;
        }
        let n = test.len() as f64;
        println!(
            "class-mean-guided ab-mse {:.2} hue-acc {:.3}; |own - class mean|^2 {:.4}; |audio sem - class mean|^2 {:.4}",
            mse / n,
            hits as f64 / n,
            spread / n,
            gap / n
        );
    }
    let modes: &[AblationMode] = if p.joint {
        &[AblationMode::NoMultistep]
    } else {
        &[
            AblationMode::Full,
            AblationMode::NoR,
            AblationMode::MissingAudio,
            AblationMode::NoRMissingAudio,
        ]
    };
    for &m in modes {
        match evaluate(&c, &test, m, None, exec) {
            Ok(r) => println!("{}", r.summary_line()),
            Err(e) => println!("{m}: {e}"),
        }
    }
    Ok(())
}
