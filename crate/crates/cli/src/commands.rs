//! The six subcommand implementations. Everything here resolves its
//! full configuration up front, validates it before touching data,
//! and persists the resolved values next to its outputs.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayD};
use paseg_core::config::{format_f64, write_config, ConfigMap};
use paseg_core::error::{CoreError, Result};
use paseg_core::evalreport::{
    aggregate, evaluate_model, read_report_csv, render_labels, run_feasibility, run_robustness,
    select_cases, write_report_csv, CaseStatistic, ExperimentConfig, ExperimentReport,
    ExperimentRun, GroupField, MODEL_COMBOS,
};
use paseg_core::manifest::load_all;
use paseg_core::models::predict_labels;
use paseg_core::nn::{read_checkpoint, write_checkpoint};
use paseg_core::phantom::{generate_dataset, read_config};
use paseg_core::preprocess::{preprocess_stack, CropSpec};
use paseg_core::split::{split_by_volunteer, DatasetSplit};
use paseg_core::tensorfile::{read_tensor, write_tensor, TensorData};
use paseg_core::trainer::{self, resolve_ids, write_training_log, BatchRecord, TrainConfig};
use paseg_core::{Architecture, InputMode, Model, Sample, SampleId, TissueClass};

use crate::{ExperimentArgs, SplitArgs, TrainArgs};

fn config_map(path: Option<&Path>) -> Result<ConfigMap> {
    match path {
        Some(p) => ConfigMap::from_file(p),
        None => ConfigMap::parse("", "defaults"),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CoreError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

pub fn generate(out: &Path, config_path: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = config_map(config_path)?;
    let (mut config, grid) = read_config(&cfg)?;
    cfg.ensure_all_used()?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let ds = generate_dataset(out, &config, &grid)?;
    println!("generated {} samples into {}", ds.refs.len(), out.display());
    Ok(())
}

fn to_f64(t: TensorData) -> ArrayD<f64> {
    match t {
        TensorData::F64(a) => a,
        TensorData::F32(a) => a.mapv(|v| v as f64),
        TensorData::U8(a) => a.mapv(|v| v as f64),
    }
}

fn parse_crop(s: &str) -> Result<CropSpec> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CoreError::config(format!("crop component '{p}' is not a pixel count")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(CoreError::config(format!(
            "crop '{s}' must be top,left,height,width"
        )));
    }
    CropSpec::new(parts[0], parts[1], parts[2], parts[3])
}

pub fn preprocess(
    stack_path: &Path,
    energies_path: &Path,
    out: &Path,
    sections: usize,
    crop: Option<&str>,
) -> Result<()> {
    let stack: Array4<f64> = to_f64(read_tensor(stack_path)?)
        .into_dimensionality()
        .map_err(|_| {
            CoreError::invalid("frame stack", "expected a (repeats, channels, H, W) tensor")
        })?;
    let energies: Array2<f64> = to_f64(read_tensor(energies_path)?)
        .into_dimensionality()
        .map_err(|_| CoreError::invalid("frame stack", "expected (repeats, channels) energies"))?;
    let crop_spec = crop.map(parse_crop).transpose()?;
    let outcome = preprocess_stack(&stack, &energies, sections, crop_spec.as_ref())?;
    write_tensor(out, &TensorData::F64(outcome.cube.into_dyn()))?;
    let scores: Vec<String> = outcome.acutances.iter().map(|a| format_f64(*a)).collect();
    println!(
        "kept section {} of {}; acutances: {}",
        outcome.section_index,
        sections,
        scores.join(", ")
    );
    Ok(())
}

fn load_dataset(data_dir: &Path) -> Result<Vec<Sample>> {
    let cfg = ConfigMap::from_file(&data_dir.join("config_resolved.txt"))?;
    let (config, _grid) = read_config(&cfg)?;
    load_all(&data_dir.join("manifest.txt"), config.axis)
}

fn make_split(samples: &[Sample], sa: SplitArgs) -> Result<DatasetSplit> {
    let items: Vec<(SampleId, u32)> = samples
        .iter()
        .map(|s| (s.id.clone(), s.meta.volunteer_id))
        .collect();
    split_by_volunteer(&items, sa.test_volunteers, sa.val_images, sa.split_seed)
}

fn write_audit(path: &Path, audit: &[BatchRecord]) -> Result<()> {
    let mut text = String::from("epoch,batch,sample_ids\n");
    for r in audit {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.batch, r.sample_ids.join(";")));
    }
    write_text(path, &text)
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_else(|| "NA".to_string())
}

/// Per-class mean Dice and TPR tables, one column per model
/// combination present in the report, in the fixed combination order.
fn write_summaries(out: &Path, report: &ExperimentReport) -> Result<()> {
    let groups = aggregate(
        report,
        &[GroupField::Architecture, GroupField::Input, GroupField::Class],
    )?;
    let mut dice_map = HashMap::new();
    let mut tpr_map = HashMap::new();
    for g in &groups {
        let key = (
            g.key.architecture.unwrap(),
            g.key.input.unwrap(),
            g.key.class.unwrap(),
        );
        dice_map.insert(key, g.dice);
        tpr_map.insert(key, g.tpr);
    }
    let combos: Vec<(Architecture, InputMode)> = MODEL_COMBOS
        .iter()
        .copied()
        .filter(|(a, m)| TissueClass::ALL.iter().any(|c| dice_map.contains_key(&(*a, *m, *c))))
        .collect();
    for (file, map) in [("summary_dice.csv", &dice_map), ("summary_tpr.csv", &tpr_map)] {
        let mut text = String::from("class");
        for (a, m) in &combos {
            text.push_str(&format!(",{a}_{m}"));
        }
        text.push('\n');
        for cls in TissueClass::ALL {
            text.push_str(cls.name());
            for (a, m) in &combos {
                text.push(',');
                text.push_str(&fmt_cell(map.get(&(*a, *m, cls)).copied().flatten()));
            }
            text.push('\n');
        }
        write_text(&out.join(file), &text)?;
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let arch = Architecture::parse(&args.arch)?;
    let input = InputMode::parse(&args.input)?;
    let file = config_map(args.config.as_deref())?;

    let mut cfg = TrainConfig::defaults(arch, input);
    cfg.epochs = args.epochs.or(file.get_usize("epochs")?).unwrap_or(cfg.epochs);
    cfg.learning_rate = args
        .lr
        .or(file.get_f64("learning_rate")?)
        .unwrap_or(cfg.learning_rate);
    cfg.batch_size = args
        .batch_size
        .or(file.get_usize("batch_size")?)
        .unwrap_or(cfg.batch_size);
    cfg.batches_per_epoch = args
        .batches_per_epoch
        .or(file.get_usize("batches_per_epoch")?)
        .unwrap_or(cfg.batches_per_epoch);
    cfg.base_channels = args
        .base_channels
        .or(file.get_usize("base_channels")?)
        .unwrap_or(cfg.base_channels);
    cfg.dice_weight = args
        .dice_weight
        .or(file.get_f64("dice_weight")?)
        .unwrap_or(cfg.dice_weight);
    if args.no_augment {
        cfg.augmentation = false;
    } else if let Some(b) = file.get_bool("augmentation")? {
        cfg.augmentation = b;
    }
    cfg.seed = args.seed.or(file.get_u64("seed")?).unwrap_or(cfg.seed);
    file.ensure_all_used()?;
    cfg.validate()?;

    let samples = load_dataset(&args.data)?;
    let split = make_split(&samples, args.split_args)?;
    let train_set = resolve_ids(&samples, &split.train)?;
    let val_set = resolve_ids(&samples, &split.val)?;
    let outcome = trainer::train(&cfg, &train_set, &val_set)?;

    create_dir(&args.out)?;
    write_checkpoint(&args.out.join("checkpoint.pack"), &outcome.checkpoint(&cfg))?;
    write_training_log(&args.out.join("training_log.csv"), &outcome.log)?;
    write_audit(&args.out.join("batch_audit.csv"), &outcome.audit)?;
    write_config(
        &args.out.join("config_resolved.txt"),
        &train_pairs(&cfg, args.split_args, &split),
    )?;
    println!(
        "trained {arch} on {input}: {} epochs, best epoch {}, outputs in {}",
        cfg.epochs,
        outcome.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn train_pairs(cfg: &TrainConfig, sa: SplitArgs, split: &DatasetSplit) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = vec![
        ("architecture".into(), cfg.architecture.to_string()),
        ("input_mode".into(), cfg.input_mode.to_string()),
        ("learning_rate".into(), format_f64(cfg.learning_rate)),
        ("batch_size".into(), cfg.batch_size.to_string()),
        ("batches_per_epoch".into(), cfg.batches_per_epoch.to_string()),
        ("epochs".into(), cfg.epochs.to_string()),
        ("augmentation".into(), cfg.augmentation.to_string()),
        ("flip_probability".into(), format_f64(cfg.augment.flip_probability)),
        ("rotation_deg".into(), format_f64(cfg.augment.rotation_deg)),
        ("shear_deg".into(), format_f64(cfg.augment.shear_deg)),
        ("base_channels".into(), cfg.base_channels.to_string()),
        ("dice_weight".into(), format_f64(cfg.dice_weight)),
        ("seed".into(), cfg.seed.to_string()),
        ("test_volunteers".into(), sa.test_volunteers.to_string()),
        ("val_images".into(), sa.val_images.to_string()),
        ("split_seed".into(), sa.split_seed.to_string()),
        ("n_train".into(), split.train.len().to_string()),
        ("n_val".into(), split.val.len().to_string()),
        ("n_test".into(), split.test.len().to_string()),
    ];
    pairs.sort();
    pairs
}

pub fn evaluate(
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    split_name: &str,
    sa: SplitArgs,
) -> Result<()> {
    let cp = read_checkpoint(checkpoint)?;
    let model = Model::from_checkpoint(&cp)?;
    let input = match cp.header_value("input_mode") {
        Some(m) => InputMode::parse(m)?,
        None => {
            return Err(CoreError::config(
                "checkpoint carries no input_mode header; cannot pick channels",
            ))
        }
    };
    let samples = load_dataset(data)?;
    let ids: Vec<SampleId> = match split_name {
        "all" => samples.iter().map(|s| s.id.clone()).collect(),
        "train" => make_split(&samples, sa)?.train,
        "val" => make_split(&samples, sa)?.val,
        "test" => make_split(&samples, sa)?.test,
        other => {
            return Err(CoreError::config(format!(
                "unknown split '{other}': expected train, val, test, or all"
            )))
        }
    };
    if ids.is_empty() {
        return Err(CoreError::config(format!("split '{split_name}' is empty")));
    }
    let subset = resolve_ids(&samples, &ids)?;
    let report = ExperimentReport {
        rows: evaluate_model(&model, input, &subset)?,
    };
    create_dir(out)?;
    write_report_csv(&out.join("report.csv"), &report)?;
    write_summaries(out, &report)?;
    let overall = aggregate(&report, &[])?;
    println!(
        "mean dice {} over {} {} samples",
        fmt_cell(overall[0].dice),
        subset.len(),
        split_name
    );
    Ok(())
}

pub fn experiment(args: &ExperimentArgs) -> Result<()> {
    let file = config_map(args.config.as_deref())?;
    let mut cfg = ExperimentConfig::new(0);
    cfg.seed = args.seed.or(file.get_u64("seed")?).unwrap_or(cfg.seed);
    cfg.unet.epochs = args
        .unet_epochs
        .or(file.get_usize("unet_epochs")?)
        .unwrap_or(cfg.unet.epochs);
    cfg.unet.batch_size = args
        .unet_batch_size
        .or(file.get_usize("unet_batch_size")?)
        .unwrap_or(cfg.unet.batch_size);
    cfg.unet.batches_per_epoch = args
        .unet_batches_per_epoch
        .or(file.get_usize("unet_batches_per_epoch")?)
        .unwrap_or(cfg.unet.batches_per_epoch);
    cfg.unet.base_channels = args
        .unet_base_channels
        .or(file.get_usize("unet_base_channels")?)
        .unwrap_or(cfg.unet.base_channels);
    cfg.unet.learning_rate = args
        .unet_lr
        .or(file.get_f64("unet_learning_rate")?)
        .unwrap_or(cfg.unet.learning_rate);
    cfg.fcnn.epochs = args
        .fcnn_epochs
        .or(file.get_usize("fcnn_epochs")?)
        .unwrap_or(cfg.fcnn.epochs);
    cfg.fcnn.batch_size = args
        .fcnn_batch_size
        .or(file.get_usize("fcnn_batch_size")?)
        .unwrap_or(cfg.fcnn.batch_size);
    cfg.fcnn.batches_per_epoch = args
        .fcnn_batches_per_epoch
        .or(file.get_usize("fcnn_batches_per_epoch")?)
        .unwrap_or(cfg.fcnn.batches_per_epoch);
    cfg.fcnn.learning_rate = args
        .fcnn_lr
        .or(file.get_f64("fcnn_learning_rate")?)
        .unwrap_or(cfg.fcnn.learning_rate);
    file.ensure_all_used()?;

    if args.kind != "feasibility" && args.kind != "robustness" {
        return Err(CoreError::config(format!(
            "unknown experiment kind '{}': expected feasibility or robustness",
            args.kind
        )));
    }
    let samples = load_dataset(&args.data)?;
    let split = make_split(&samples, args.split_args)?;
    let run = if args.kind == "feasibility" {
        run_feasibility(&samples, &split, &cfg)?
    } else {
        run_robustness(&samples, &split, &cfg)?
    };
    write_experiment_outputs(&args.out, &args.kind, &cfg, args.split_args, &samples, &run)?;
    println!(
        "{} experiment done: {} rows in {}",
        args.kind,
        run.report.rows.len(),
        args.out.join("report.csv").display()
    );
    Ok(())
}

fn write_experiment_outputs(
    out: &Path,
    kind: &str,
    cfg: &ExperimentConfig,
    sa: SplitArgs,
    samples: &[Sample],
    run: &ExperimentRun,
) -> Result<()> {
    create_dir(out)?;
    create_dir(&out.join("checkpoints"))?;
    create_dir(&out.join("logs"))?;
    create_dir(&out.join("cases"))?;

    write_report_csv(&out.join("report.csv"), &run.report)?;
    write_summaries(out, &run.report)?;

    for cr in &run.runs {
        let stem = format!("{}_{}", cr.config.architecture, cr.config.input_mode);
        write_checkpoint(
            &out.join("checkpoints").join(format!("{stem}.pack")),
            &cr.outcome.checkpoint(&cr.config),
        )?;
        write_training_log(&out.join("logs").join(format!("{stem}_log.csv")), &cr.outcome.log)?;
        write_audit(&out.join("logs").join(format!("{stem}_audit.csv")), &cr.outcome.audit)?;
    }

    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    for cr in &run.runs {
        let stem = format!("{}_{}", cr.config.architecture, cr.config.input_mode);
        for (stat, name) in [
            (CaseStatistic::Best, "best"),
            (CaseStatistic::Median, "median"),
            (CaseStatistic::Worst, "worst"),
        ] {
            let picked = select_cases(
                &run.report,
                cr.config.architecture,
                cr.config.input_mode,
                TissueClass::Blood,
                stat,
            );
            match picked {
                Ok(id) => {
                    let s = by_id
                        .get(id.as_str())
                        .ok_or_else(|| CoreError::Query(format!("case sample '{id}' not loaded")))?;
                    let pred = predict_labels(&cr.outcome.model, s, cr.config.input_mode)?;
                    render_labels(&out.join("cases").join(format!("{stem}_{name}_{id}_pred.png")), &pred)?;
                    render_labels(&out.join("cases").join(format!("{stem}_{name}_{id}_ref.png")), &s.labels)?;
                }
                Err(CoreError::Query(_)) => {
                    // No sample with a defined blood Dice; nothing to render.
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let mut pairs: Vec<(String, String)> = vec![
        ("kind".into(), kind.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("test_volunteers".into(), sa.test_volunteers.to_string()),
        ("val_images".into(), sa.val_images.to_string()),
        ("split_seed".into(), sa.split_seed.to_string()),
        ("unet_epochs".into(), cfg.unet.epochs.to_string()),
        ("unet_learning_rate".into(), format_f64(cfg.unet.learning_rate)),
        ("unet_batch_size".into(), cfg.unet.batch_size.to_string()),
        ("unet_batches_per_epoch".into(), cfg.unet.batches_per_epoch.to_string()),
        ("unet_base_channels".into(), cfg.unet.base_channels.to_string()),
        ("unet_dice_weight".into(), format_f64(cfg.unet.dice_weight)),
        ("unet_augmentation".into(), cfg.unet.augmentation.to_string()),
        ("fcnn_epochs".into(), cfg.fcnn.epochs.to_string()),
        ("fcnn_learning_rate".into(), format_f64(cfg.fcnn.learning_rate)),
        ("fcnn_batch_size".into(), cfg.fcnn.batch_size.to_string()),
        ("fcnn_batches_per_epoch".into(), cfg.fcnn.batches_per_epoch.to_string()),
    ];
    pairs.sort();
    write_config(&out.join("config_resolved.txt"), &pairs)
}

pub fn report(report_path: &Path, out: &Path) -> Result<()> {
    let report = read_report_csv(report_path)?;
    create_dir(out)?;
    write_summaries(out, &report)?;
    for g in aggregate(&report, &[GroupField::Class])? {
        println!(
            "{}: dice {} tpr {}",
            g.key.class.unwrap(),
            fmt_cell(g.dice),
            fmt_cell(g.tpr)
        );
    }
    Ok(())
}
