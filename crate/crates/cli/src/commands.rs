use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use dfp::attribution::{
    component_importance, export_report, render_heatmap_text, target_value, ImportanceMethod, ReportFormat, Target,
};
use dfp::dataset::{load_dataset, synthetic_prompts, Example};
use dfp::decomposed::{run_decomposed, ApportionRule, InitSpec, RunOptions};
use dfp::eval::{
    bench_depass_vs_ablation, depass_subspace_masking, faithfulness_csv, masking_csv, run_component_masking,
    run_faithfulness, target_probability, ComponentScoreMethod, FaithfulnessConfig, InterventionKind, MaskOrder,
    SubspaceMaskConfig, TokenScoreMethod, UnitKind,
};
use dfp::model_io::{
    generate_random_model, read_config, weights_from_archive, weights_to_archive, Archive, ModelConfig,
};
use dfp::probes::{projection_from_directions, train_probe, LinearProbe, ProbeHyperParams, ProbeSet, ProjectionMatrix};
use dfp::transformer::{forward as forward_pass, greedy_argmax};
use dfp::{DType, Error, Matrix, Result, Scalar};

use crate::args::*;
use crate::inputs::*;
use crate::manifest::Run;

macro_rules! by_precision {
    ($dtype:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn dtype(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

fn load_model(path: &Path, run: &mut Run) -> Result<(Archive, ModelConfig)> {
    let archive = read_archive(path, run)?;
    let config = read_config(&archive)?;
    Ok((archive, config))
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

pub fn gen_model(a: &GenModelArgs) -> Result<()> {
    let mut run = Run::new("gen-model", a);
    run.input(&a.config)?;
    let text = std::fs::read(&a.config)?;
    let config: ModelConfig =
        serde_json::from_slice(&text).map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    config.validate()?;
    let (bytes, fp) = by_precision!(config.numeric_precision, gen_bytes(&config, a.seed))?;
    run.fingerprint(&fp);
    run.output(&a.out, bytes);
    run.finish()?;
    print_json(&json!({ "model_fingerprint": fp, "out": a.out }));
    Ok(())
}

fn gen_bytes<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Vec<u8>, String)> {
    let ws = generate_random_model::<T>(config, seed)?;
    Ok((weights_to_archive(&ws).to_bytes(), ws.fingerprint().to_string()))
}

pub fn forward(a: &ForwardArgs) -> Result<()> {
    let mut run = Run::new("forward", a);
    let (archive, config) = load_model(&a.model, &mut run)?;
    let tokens = require_prompt(&a.prompt, &mut run)?;
    let (bytes, summary) = by_precision!(config.numeric_precision, forward_t(&archive, &tokens))?;
    run.fingerprint(summary["model_fingerprint"].as_str().unwrap_or_default());
    run.output(&a.trace_out, bytes);
    run.finish()?;
    print_json(&summary);
    Ok(())
}

fn forward_t<T: Scalar>(archive: &Archive, tokens: &[usize]) -> Result<(Vec<u8>, serde_json::Value)> {
    let (_, ws) = weights_from_archive::<T>(archive)?;
    let trace = forward_pass(tokens, &ws)?;
    let prediction = greedy_argmax(trace.last_logits())?;
    let summary = json!({
        "model_fingerprint": ws.fingerprint(),
        "tokens": tokens,
        "prediction": prediction,
        "probability": target_probability(&trace, prediction)?,
    });
    Ok((trace.to_archive().to_bytes(), summary))
}

pub fn attribute(a: &AttributeArgs) -> Result<()> {
    let mut run = Run::new("attribute", a);
    let (archive, config) = load_model(&a.model, &mut run)?;
    let tokens = require_prompt(&a.prompt, &mut run)?;
    let (bytes, heatmap, fp) = by_precision!(config.numeric_precision, attribute_t(a, &archive, &tokens, &mut run))?;
    run.fingerprint(&fp);
    run.output(&a.out, bytes);
    run.finish()?;
    if let Some(h) = heatmap {
        print!("{h}");
    }
    Ok(())
}

fn attribute_t<T: Scalar>(
    a: &AttributeArgs,
    archive: &Archive,
    tokens: &[usize],
    run: &mut Run,
) -> Result<(Vec<u8>, Option<String>, String)> {
    let rule: ApportionRule = a.rule.parse()?;
    let method: ImportanceMethod = a.method.parse()?;
    let positions = parse_positions(&a.positions)?;
    let selfcheck = if a.selfcheck || a.no_selfcheck {
        a.selfcheck
    } else {
        T::DTYPE == DType::F64
    };

    let (config, ws) = weights_from_archive::<T>(archive)?;
    let trace = forward_pass(tokens, &ws)?;
    check_positions(&positions, tokens.len())?;

    let target = match a.target.as_deref().map(parse_target).transpose()? {
        None => Target::Logit {
            token: greedy_argmax(trace.last_logits())?,
        },
        Some(TargetSpec::Logit(token)) => Target::Logit { token },
        Some(TargetSpec::Direction { file, layer }) => {
            let vector = read_direction(&file, run)?;
            if vector.len() != config.d_model {
                return Err(Error::Input(format!(
                    "direction has {} entries, model width is {}",
                    vector.len(),
                    config.d_model
                )));
            }
            if layer >= config.num_layers {
                return Err(Error::Usage(format!("layer {layer} out of range")));
            }
            Target::Direction { layer, vector }
        }
    };

    let need_layer = || {
        a.layer.ok_or_else(|| {
            Error::Usage(format!(
                "--init {} needs --layer",
                format!("{:?}", a.init).to_lowercase()
            ))
        })
    };
    let spec: InitSpec<T> = match a.init {
        InitKind::Token => match &a.groups {
            Some(p) => InitSpec::TokenWise {
                groups: read_groups(p, run)?,
            },
            None => InitSpec::token_wise(tokens.len()),
        },
        InitKind::Heads => InitSpec::AttentionHeads { layer: need_layer()? },
        InitKind::Neurons => {
            let layer = need_layer()?;
            match &a.groups {
                Some(p) => InitSpec::MlpNeurons {
                    layer,
                    groups: read_groups(p, run)?,
                },
                None => InitSpec::neuron_bins(layer, config.d_mlp, a.bin),
            }
        }
        InitKind::Subspace => {
            let layer = need_layer()?;
            let path = a
                .projector
                .as_ref()
                .ok_or_else(|| Error::Usage("--init subspace needs --projector".into()))?;
            let projector = ProjectionMatrix::<T>::from_archive(&read_archive(path, run)?)?;
            InitSpec::Subspace { layer, projector }
        }
    };

    let mut opts = RunOptions::with_rule(rule);
    opts.check_reconstruction = selfcheck;
    if let Target::Direction { layer, .. } = &target {
        opts.snapshot_layers.insert(*layer);
    }
    let dec = run_decomposed(&trace, &ws, &spec, &opts)?;
    if selfcheck {
        log::info!("max reconstruction error {:.3e}", dec.max_reconstruction_error());
    }
    let report = component_importance(&dec, &trace, &ws, &spec, method, &target, &positions)?;

    if selfcheck {
        if method == ImportanceMethod::Depass {
            for (&i, s) in report.positions.iter().zip(&report.scores) {
                let exact = target_value(&trace, &report.target, i);
                let sum: f64 = s.iter().sum();
                let scale = s
                    .iter()
                    .map(|x| x.abs())
                    .sum::<f64>()
                    .max(exact.abs())
                    .max(f64::MIN_POSITIVE);
                if (sum - exact).abs() > T::RECON_TOL * scale {
                    return Err(Error::Consistency(format!(
                        "scores at position {i} sum to {sum}, target is {exact}"
                    )));
                }
            }
        } else {
            log::info!("completeness is only checked for signed depass scores");
        }
    }

    let format = match a.format {
        Format::Json => ReportFormat::Json,
        Format::Csv => ReportFormat::Csv,
    };
    let heatmap = a.heatmap.then(|| render_heatmap_text(&report));
    Ok((export_report(&report, format)?, heatmap, ws.fingerprint().to_string()))
}

#[derive(Deserialize)]
struct FeatureLine {
    features: Option<Vec<f64>>,
    /// `archive#tensor@row`, relative to the JSONL file.
    features_ref: Option<String>,
    label: usize,
    layer: Option<usize>,
}

type Grouped = BTreeMap<Option<usize>, (Vec<Vec<f64>>, Vec<usize>)>;

fn read_features(path: &Path, run: &mut Run) -> Result<Grouped> {
    run.input(path)?;
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut archives: HashMap<PathBuf, Archive> = HashMap::new();
    let mut groups: Grouped = BTreeMap::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Input(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let rec: FeatureLine = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let x = match (rec.features, rec.features_ref) {
            (Some(v), _) => v,
            (None, Some(r)) => {
                let (file, rest) = r.split_once('#').ok_or_else(|| at(format!("bad features_ref {r:?}")))?;
                let (tensor, row) = rest
                    .rsplit_once('@')
                    .ok_or_else(|| at(format!("bad features_ref {r:?}")))?;
                let row: usize = row.parse().map_err(|_| at(format!("bad row in {r:?}")))?;
                let file = base.join(file);
                if !archives.contains_key(&file) {
                    archives.insert(file.clone(), read_archive(&file, run)?);
                }
                let (shape, values) = archives[&file].tensor_f64(tensor)?;
                let cols = *shape.last().unwrap_or(&0);
                if shape.len() != 2 || row >= shape[0] {
                    return Err(at(format!("row {row} not in tensor {tensor} of shape {shape:?}")));
                }
                values[row * cols..(row + 1) * cols].to_vec()
            }
            (None, None) => return Err(at("line has neither features nor features_ref".into())),
        };
        if *dim.get_or_insert(x.len()) != x.len() {
            return Err(at(format!(
                "feature width {} differs from {}",
                x.len(),
                dim.unwrap_or(0)
            )));
        }
        let g = groups.entry(rec.layer).or_default();
        g.0.push(x);
        g.1.push(rec.label);
    }
    if groups.is_empty() {
        return Err(Error::Input(format!("{} has no examples", path.display())));
    }
    if groups.len() > 1 && groups.contains_key(&None) {
        return Err(Error::Input("either every line carries a layer or none does".into()));
    }
    Ok(groups)
}

pub fn probe_train(a: &ProbeTrainArgs) -> Result<()> {
    let mut run = Run::new("probe-train", a);
    let groups = read_features(&a.features, &mut run)?;
    let hp = ProbeHyperParams {
        lr: a.lr,
        steps: a.steps,
        l2: a.l2,
        seed: a.seed,
    };
    let (bytes, summary) = by_precision!(dtype(a.precision), train_t(&groups, &hp, a.untruthful_class))?;
    run.output(&a.out, bytes);
    run.finish()?;
    print_json(&summary);
    Ok(())
}

fn train_t<T: Scalar>(
    groups: &Grouped,
    hp: &ProbeHyperParams,
    untruthful: usize,
) -> Result<(Vec<u8>, serde_json::Value)> {
    let mut probes = BTreeMap::new();
    let mut summary = serde_json::Map::new();
    for (layer, (rows, labels)) in groups {
        let m = Matrix::from_rows(
            &rows
                .iter()
                .map(|r| r.iter().map(|&v| T::of_f64(v)).collect())
                .collect::<Vec<_>>(),
        );
        let mut probe = train_probe(&m, labels, hp)?;
        probe.layer = *layer;
        let key = layer.map_or("probe".to_string(), |l| l.to_string());
        if let Some(t) = &probe.training {
            summary.insert(
                key,
                json!({ "final_loss": t.final_loss, "train_accuracy": t.train_accuracy }),
            );
        }
        probes.insert(*layer, probe);
    }
    let archive = if let Some(single) = probes.remove(&None) {
        single.to_archive()
    } else {
        let probes: BTreeMap<usize, LinearProbe<T>> = probes.into_iter().filter_map(|(l, p)| Some((l?, p))).collect();
        if probes.values().any(|p| untruthful >= p.num_classes()) {
            return Err(Error::Input(format!(
                "untruthful class {untruthful} exceeds the class count"
            )));
        }
        ProbeSet {
            probes,
            untruthful_class: untruthful,
        }
        .to_archive()
    };
    Ok((archive.to_bytes(), serde_json::Value::Object(summary)))
}

pub fn project(a: &ProjectArgs) -> Result<()> {
    let mut run = Run::new("project", a);
    let archive = read_archive(&a.directions, &mut run)?;
    let names: Vec<String> = if archive.contains("directions") {
        vec!["directions".into()]
    } else {
        // probe and probe-set archives: every weight matrix contributes its rows
        let weights: Vec<String> = archive
            .names()
            .filter(|n| *n == "probe.weight" || (n.starts_with("probes.") && n.ends_with(".weight")))
            .map(str::to_string)
            .collect();
        let all: Vec<&str> = archive.names().collect();
        match (weights.is_empty(), all.as_slice()) {
            (false, _) => weights,
            (true, [one]) => vec![one.to_string()],
            _ => return Err(Error::Input("archive has no \"directions\" tensor".into())),
        }
    };
    let mut values = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for name in &names {
        let (shape, v) = archive.tensor_f64(name)?;
        let (r, d) = match shape.as_slice() {
            [d] => (1, *d),
            [r, d] => (*r, *d),
            _ => return Err(Error::Input(format!("tensor {name} has shape {shape:?}"))),
        };
        if *width.get_or_insert(d) != d {
            return Err(Error::Input(format!(
                "tensor {name} has width {d}, expected {}",
                width.unwrap_or(0)
            )));
        }
        rows += r;
        values.extend(v);
    }
    let cols = width.unwrap_or(0);
    let (bytes, rank) = by_precision!(dtype(a.precision), project_t(rows, cols, &values))?;
    run.output(&a.out, bytes);
    run.finish()?;
    print_json(&json!({ "rank": rank, "dim": cols }));
    Ok(())
}

fn project_t<T: Scalar>(rows: usize, cols: usize, values: &[f64]) -> Result<(Vec<u8>, usize)> {
    let m = Matrix::from_vec(rows, cols, values.iter().map(|&v| T::of_f64(v)).collect());
    let p = projection_from_directions(&m)?;
    p.check()?;
    Ok((p.to_archive().to_bytes(), p.rank()))
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut run = Run::new("evaluate", a);
    let (archive, config) = load_model(&a.model, &mut run)?;
    let vocab = a.vocab.as_ref().map(|p| read_vocab(p, &mut run)).transpose()?;
    run.input(&a.dataset)?;
    let dataset = load_dataset(&a.dataset, vocab.as_ref())?;
    let probes = match (a.protocol, &a.probes) {
        (Protocol::SubspaceMask, None) => return Err(Error::Usage("subspace-mask needs --probes".into())),
        (Protocol::SubspaceMask, Some(p)) => Some(read_archive(p, &mut run)?),
        _ => None,
    };
    let (bytes, fp) = by_precision!(
        config.numeric_precision,
        evaluate_t(a, &archive, &dataset, probes.as_ref())
    )?;
    run.fingerprint(&fp);
    run.output(&a.out, bytes);
    run.finish()
}

fn evaluate_t<T: Scalar>(
    a: &EvaluateArgs,
    archive: &Archive,
    dataset: &[Example],
    probes: Option<&Archive>,
) -> Result<(Vec<u8>, String)> {
    let (config, ws) = weights_from_archive::<T>(archive)?;
    let bytes = match a.protocol {
        Protocol::Faithfulness => {
            let methods = a
                .methods
                .as_deref()
                .unwrap_or("depass,attention_mean,attention_rollout,constant");
            let cfg = FaithfulnessConfig {
                methods: parse_list::<TokenScoreMethod>(methods, "method")?,
                kinds: split_list(&a.kinds)
                    .into_iter()
                    .map(|k| match k {
                        "patch_top" => Ok(InterventionKind::PatchTop),
                        "recover_top" => Ok(InterventionKind::RecoverTop),
                        _ => Err(Error::Usage(format!("unknown intervention {k:?}"))),
                    })
                    .collect::<Result<_>>()?,
                grid: parse_list(
                    a.grid.as_deref().unwrap_or("0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"),
                    "fraction",
                )?,
                keep_bos: !a.drop_bos,
            };
            let curves = run_faithfulness(&ws, dataset, &cfg)?;
            match a.format {
                Format::Csv => faithfulness_csv(&curves)?,
                Format::Json => serde_json::to_vec_pretty(&curves)?,
            }
        }
        Protocol::Components => {
            let layer = a.layer.ok_or_else(|| Error::Usage("components needs --layer".into()))?;
            if layer >= config.num_layers {
                return Err(Error::Usage(format!("layer {layer} out of range")));
            }
            let kind = match a.units.as_str() {
                "heads" => UnitKind::Heads { layer },
                "neurons" => UnitKind::neuron_bins(layer, config.d_mlp, a.bin),
                u => return Err(Error::Usage(format!("unknown unit kind {u:?}"))),
            };
            let n = kind.count(&config);
            let grid: Vec<usize> = match &a.grid {
                Some(g) => parse_list(g, "count")?,
                None => (0..=n).collect(),
            };
            let methods =
                parse_list::<ComponentScoreMethod>(a.methods.as_deref().unwrap_or("depass,norm,random0"), "method")?;
            let orders: Vec<MaskOrder> = split_list(&a.orders)
                .into_iter()
                .map(|o| match o {
                    "top_k" => Ok(MaskOrder::TopK),
                    "bottom_k" => Ok(MaskOrder::BottomK),
                    _ => Err(Error::Usage(format!("unknown mask order {o:?}"))),
                })
                .collect::<Result<_>>()?;
            let mut curves = Vec::new();
            for &m in &methods {
                for &o in &orders {
                    curves.push(run_component_masking(&ws, dataset, &kind, m, o, &grid)?);
                }
            }
            match a.format {
                Format::Csv => masking_csv(&curves)?,
                Format::Json => serde_json::to_vec_pretty(&curves)?,
            }
        }
        Protocol::SubspaceMask => {
            let probes = ProbeSet::<T>::from_archive(probes.expect("checked by caller"))?;
            let mut cfg = SubspaceMaskConfig::for_layers(config.num_layers);
            if let Some(l) = a.min_layer {
                cfg.min_layer = l;
            }
            cfg.rule = a.rule.parse()?;
            cfg.keep_bos = !a.drop_bos;
            let methods = split_list(a.methods.as_deref().unwrap_or("none,flag,depass"))
                .into_iter()
                .map(|m| match m {
                    "none" | "flag" | "depass" => Ok(m.to_string()),
                    _ => Err(Error::Usage(format!("unknown masking method {m:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let budgets: Vec<f64> = parse_list(a.grid.as_deref().unwrap_or("1.0"), "budget")?;
            let rows = subspace_mask_rows(&ws, dataset, &probes, &cfg, &methods, &budgets)?;
            match a.format {
                Format::Csv => subspace_csv(&rows)?,
                Format::Json => serde_json::to_vec_pretty(&rows)?,
            }
        }
    };
    Ok((bytes, ws.fingerprint().to_string()))
}

#[derive(Debug, Clone, Serialize)]
struct SubspaceRow {
    method: String,
    budget: f64,
    accuracy: f64,
    mean_removed: f64,
    n_examples: usize,
}

fn subspace_mask_rows<T: Scalar>(
    ws: &dfp::model_io::WeightSet<T>,
    dataset: &[Example],
    probes: &ProbeSet<T>,
    cfg: &SubspaceMaskConfig,
    methods: &[String],
    budgets: &[f64],
) -> Result<Vec<SubspaceRow>> {
    if dataset.is_empty() {
        return Err(Error::Evaluation("empty dataset".into()));
    }
    let traces = dataset
        .iter()
        .map(|ex| forward_pass(&ex.tokens, ws))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &budget in budgets {
        let cfg = SubspaceMaskConfig { budget, ..cfg.clone() };
        let results = traces
            .iter()
            .map(|t| depass_subspace_masking(t, ws, probes, &cfg))
            .collect::<Result<Vec<_>>>()?;
        for m in methods {
            let mut correct = 0usize;
            let mut removed = 0usize;
            for ((ex, r), trace) in dataset.iter().zip(&results).zip(&traces) {
                let (tokens, gone) = match m.as_str() {
                    "flag" => (&r.flag_masked_tokens, r.flag_removed.len()),
                    "depass" => (&r.masked_tokens, r.removed.len()),
                    _ => (&ex.tokens, 0),
                };
                if tokens.is_empty() {
                    return Err(Error::Intervention("masking removed every token".into()));
                }
                let pred = if gone == 0 {
                    greedy_argmax(trace.last_logits())?
                } else {
                    greedy_argmax(forward_pass(tokens, ws)?.last_logits())?
                };
                correct += usize::from(pred == ex.target);
                removed += gone;
            }
            let n = dataset.len();
            rows.push(SubspaceRow {
                method: m.clone(),
                budget,
                accuracy: correct as f64 / n as f64,
                mean_removed: removed as f64 / n as f64,
                n_examples: n,
            });
        }
    }
    Ok(rows)
}

fn subspace_csv(rows: &[SubspaceRow]) -> Result<Vec<u8>> {
    let mut out = String::from("method,K_or_k,mean_metric,n_examples\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.method, r.budget, r.accuracy, r.n_examples));
    }
    Ok(out.into_bytes())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let mut run = Run::new("bench", a);
    let (archive, config) = load_model(&a.model, &mut run)?;
    let tokens = prompt_tokens(&a.prompt, &mut run)?;
    let (value, fp) = by_precision!(config.numeric_precision, bench_t(a, &archive, tokens))?;
    run.fingerprint(&fp);
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    run.output(&a.out, bytes);
    run.finish()?;
    print_json(&value);
    Ok(())
}

fn bench_t<T: Scalar>(
    a: &BenchArgs,
    archive: &Archive,
    tokens: Option<Vec<usize>>,
) -> Result<(serde_json::Value, String)> {
    let (_, ws) = weights_from_archive::<T>(archive)?;
    let (tokens, predicted) = match tokens {
        Some(t) => {
            let p = greedy_argmax(forward_pass(&t, &ws)?.last_logits())?;
            (t, p)
        }
        None => {
            let ex = synthetic_prompts(&ws, 1, a.len, a.seed)?.remove(0);
            (ex.tokens, ex.target)
        }
    };
    let target = a.target.unwrap_or(predicted);
    let report = bench_depass_vs_ablation(&ws, &tokens, target, a.layer, a.repeats)?;
    let value = json!({
        "tokens": tokens,
        "target": target,
        "report": report,
    });
    Ok((value, ws.fingerprint().to_string()))
}
