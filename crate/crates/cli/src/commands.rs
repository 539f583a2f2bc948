use std::collections::BTreeMap;
use std::fmt::Write as _;

use objprune::attention::{component_scores, oracle_from_components, ComponentScores};
use objprune::gapnet::{self, top_k_recall, Checkpoint, GapNet, GapParams};
use objprune::importance::ImportanceMap;
use objprune::sap::{average_pruning_ratio, build_schedule, fixed_ratio_baseline, FlopsModel, PruneSchedule};
use objprune::scenesim::{
    plant_for, planted_teacher_stack, sample_seed, spearman, teacher_answer_under_pruning, SceneGenerator,
    SceneSample, Split,
};
use objprune::search::{
    init_baseline_from_static, search as run_search, BatchItem, Budget, SearchConfig,
    SearchResult, StaticProfile,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::{BudgetPoint, RunConfig};
use crate::CliError;

fn split_count(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.data.train,
        Split::Val => cfg.data.val,
        Split::Test => cfg.data.test,
    }
}

fn jsonl_name(split: Split) -> String {
    format!("{}.jsonl", split_name(split))
}

pub fn gen(cfg: &RunConfig) -> Result<(), CliError> {
    let hashes = StageHashes::of(cfg);
    let generator = SceneGenerator::new(cfg.scene.clone())?;
    let dir = &cfg.paths.dataset;
    let mut counts = serde_json::Map::new();
    for split in SPLITS {
        let samples = generator.generate_split(split_count(cfg, split), cfg.seeds.data, split);
        write_jsonl(&dir.join(jsonl_name(split)), &hashes.gen, &samples)?;
        counts.insert(split_name(split).into(), samples.len().into());
    }
    let total = cfg.data.train + cfg.data.val + cfg.data.test;
    let mut details = serde_json::Map::new();
    details.insert("schema".into(), objprune::scenesim::SCHEMA_VERSION.into());
    details.insert("seed".into(), cfg.seeds.data.into());
    details.insert("count".into(), total.into());
    details.insert("counts".into(), counts.into());
    write_json(
        &dir.join(DATASET_MANIFEST),
        &Manifest {
            stage: "gen".into(),
            config_hash: hashes.gen.clone(),
            details,
        },
    )?;
    println!("wrote {total} scenes to {}", dir.display());
    Ok(())
}

fn load_samples(cfg: &RunConfig, hashes: &StageHashes, split: Split) -> Result<Vec<SceneSample>, CliError> {
    let dir = &cfg.paths.dataset;
    read_manifest(&dir.join(DATASET_MANIFEST), "gen", &hashes.gen)?;
    let samples: Vec<SceneSample> = read_jsonl(&dir.join(jsonl_name(split)), &hashes.gen)?;
    for s in &samples {
        s.validate()?;
    }
    Ok(samples)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleRecord {
    pub split: Split,
    pub index: u64,
    pub n_objects: usize,
    pub oracle: Vec<f64>,
    /// Per-visual-token components before pooling.
    pub components: ComponentScores,
}

pub fn extract(cfg: &RunConfig, dump_stacks: usize) -> Result<(), CliError> {
    let hashes = StageHashes::of(cfg);
    let dir = &cfg.paths.oracles;
    let t = &cfg.teacher;
    let mut audit = String::from("split,index,n_objects,spearman_plant\n");
    let mut total = 0;
    let mut per_split = Vec::new();
    for split in SPLITS {
        per_split.push((split, load_samples(cfg, &hashes, split)?));
    }
    if per_split.iter().all(|(_, s)| s.is_empty()) {
        return Err(objprune::Error::EmptyDataset.into());
    }
    let mut dumped = Vec::new();
    for (split, samples) in &per_split {
        let mut records = Vec::with_capacity(samples.len());
        for s in samples {
            let plant = plant_for(s, t);
            let stack = planted_teacher_stack(s, &plant, t.gain, t.layers, t.heads)?;
            let components = component_scores(&stack)?;
            let oracle = oracle_from_components(&components)?;
            let rho = spearman(oracle.scores(), &plant.relevance);
            let _ = writeln!(audit, "{},{},{},{}", split_name(*split), s.index, s.n_objects(), rho);
            if *split == Split::Train && (s.index as usize) < dump_stacks {
                let stem = format!("train_{:05}", s.index);
                let data = dir.join("stacks").join(format!("{stem}.bin"));
                let manifest = dir.join("stacks").join(format!("{stem}.json"));
                std::fs::create_dir_all(dir.join("stacks")).map_err(io_err("creating stacks dir"))?;
                stack.write_binary(&data, &manifest)?;
                dumped.push(stem);
            }
            records.push(OracleRecord {
                split: *split,
                index: s.index,
                n_objects: s.n_objects(),
                oracle: oracle.into_scores(),
                components,
            });
        }
        total += records.len();
        write_jsonl(&dir.join(jsonl_name(*split)), &hashes.extract, &records)?;
    }
    write_csv(&dir.join(AUDIT_FILE), &hashes.extract, &audit)?;
    let mut details = serde_json::Map::new();
    details.insert("count".into(), total.into());
    details.insert("dumped_stacks".into(), dumped.into());
    write_json(
        &dir.join(ORACLE_MANIFEST),
        &Manifest {
            stage: "extract".into(),
            config_hash: hashes.extract.clone(),
            details,
        },
    )?;
    println!("wrote {total} oracle maps to {}", dir.display());
    Ok(())
}

type Pairs = Vec<(SceneSample, ImportanceMap)>;

fn load_pairs(cfg: &RunConfig, hashes: &StageHashes, split: Split) -> Result<Pairs, CliError> {
    let samples = load_samples(cfg, hashes, split)?;
    let dir = &cfg.paths.oracles;
    read_manifest(&dir.join(ORACLE_MANIFEST), "extract", &hashes.extract)?;
    let records: Vec<OracleRecord> = read_jsonl(&dir.join(jsonl_name(split)), &hashes.extract)?;
    if records.len() != samples.len() {
        return Err(objprune::Error::SchemaMismatch(format!(
            "{} oracle maps for {} scenes",
            records.len(),
            samples.len()
        ))
        .into());
    }
    samples
        .into_iter()
        .zip(records)
        .map(|(s, r)| {
            if r.index != s.index || r.n_objects != s.n_objects() {
                return Err(objprune::Error::SchemaMismatch(format!(
                    "oracle record {} does not match scene {}",
                    r.index, s.index
                ))
                .into());
            }
            Ok((s, ImportanceMap::new(r.oracle)?))
        })
        .collect()
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let hashes = StageHashes::of(cfg);
    let train_set = load_pairs(cfg, &hashes, Split::Train)?;
    let val_set = load_pairs(cfg, &hashes, Split::Val)?;
    let net = GapNet::new(cfg.gap.clone())?;
    let out = gapnet::train(&net, &train_set, &val_set)?;
    let dir = &cfg.paths.checkpoints;
    write_json(&dir.join(CHECKPOINT_FILE), &out.params.to_checkpoint(&hashes.train))?;
    write_csv(&dir.join(LOSS_FILE), &hashes.train, &out.history_csv())?;
    let mut details = serde_json::Map::new();
    details.insert("param_count".into(), out.params.total_count().into());
    details.insert("steps".into(), out.steps.into());
    if !val_set.is_empty() {
        let summary = gapnet::evaluate(&net, &out.params, &val_set, cfg.eval.top_k)?;
        details.insert("val".into(), serde_json::to_value(summary).map_err(objprune::Error::from)?);
    }
    write_json(
        &dir.join(CHECKPOINT_MANIFEST),
        &Manifest {
            stage: "train".into(),
            config_hash: hashes.train.clone(),
            details,
        },
    )?;
    println!(
        "trained {} parameters for {} steps; checkpoint in {}",
        out.params.total_count(),
        out.steps,
        dir.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, hashes: &StageHashes) -> Result<(GapNet, GapParams), CliError> {
    let dir = &cfg.paths.checkpoints;
    read_manifest(&dir.join(CHECKPOINT_MANIFEST), "train", &hashes.train)?;
    let path = dir.join(CHECKPOINT_FILE);
    let ckpt: Checkpoint = read_json(&path)?;
    check_hash(&path, &ckpt.config_hash, &hashes.train)?;
    let net = GapNet::new(cfg.gap.clone())?;
    let params = GapParams::from_checkpoint(net.layout(), &ckpt)?;
    Ok((net, params))
}

fn text_len(s: &SceneSample) -> usize {
    s.prompt.len() + s.generated.len()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchPoint {
    pub drop_layer: usize,
    pub ratio: f64,
    pub average_pruning_ratio: f64,
    pub baseline: Vec<f64>,
    pub result: SearchResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchFile {
    pub config_hash: String,
    pub points: Vec<SearchPoint>,
}

/// Visual FLOPs of the fixed-ratio arm over `items`.
fn fixed_ratio_flops(cfg: &RunConfig, items: &[BatchItem], point: BudgetPoint) -> Result<f64, CliError> {
    let mut total = 0.0;
    for item in items {
        let schedule = fixed_ratio_baseline(
            &item.importance,
            point.drop_layer,
            point.ratio,
            cfg.dims.depth,
            cfg.eval.min_retain,
        );
        total += FlopsModel::new(cfg.dims, item.importance.len(), item.text_len).visual_flops(Some(&schedule))?;
    }
    Ok(total)
}

/// Searches the threshold scale for one budget point on predicted maps.
pub fn search_point(cfg: &RunConfig, items: &[BatchItem], point: BudgetPoint) -> Result<SearchPoint, CliError> {
    let maps: Vec<ImportanceMap> = items.iter().map(|i| i.importance.clone()).collect();
    let profile = StaticProfile::fixed_ratio(point.drop_layer, point.ratio, cfg.dims.depth);
    let baseline = init_baseline_from_static(&profile, &maps)?;
    let budget = fixed_ratio_flops(cfg, items, point)?;
    let config = SearchConfig {
        budget: Budget::Flops(budget),
        ..cfg.search.clone()
    };
    let result = run_search(
        items,
        &baseline,
        cfg.eval.min_retain,
        cfg.eval.monotone_depth,
        &config,
        &cfg.dims,
    )?;
    Ok(SearchPoint {
        drop_layer: point.drop_layer,
        ratio: point.ratio,
        average_pruning_ratio: average_pruning_ratio(point.drop_layer, point.ratio, cfg.dims.depth),
        baseline: baseline.0,
        result,
    })
}

pub fn search(cfg: &RunConfig) -> Result<(), CliError> {
    let hashes = StageHashes::of(cfg);
    let (net, params) = load_model(cfg, &hashes)?;
    let val = load_samples(cfg, &hashes, Split::Val)?;
    if val.is_empty() {
        return Err(objprune::Error::EmptyBatch.into());
    }
    let items = val
        .iter()
        .map(|s| {
            Ok(BatchItem {
                importance: net.predict(s, &params)?,
                text_len: text_len(s),
            })
        })
        .collect::<Result<Vec<_>, objprune::Error>>()?;
    let mut points = Vec::new();
    for (i, &point) in cfg.eval.points.iter().enumerate() {
        let sp = search_point(cfg, &items, point)?;
        write_csv(
            &cfg.paths.reports.join(format!("search_trace_{i}.csv")),
            &hashes.search,
            &sp.result.trace_csv(),
        )?;
        println!(
            "point {i} (drop_layer {}, ratio {}): alpha* = {:.6}, {} iterations, feasible = {}",
            point.drop_layer, point.ratio, sp.result.alpha_star, sp.result.iterations, sp.result.feasible
        );
        points.push(sp);
    }
    write_json(
        &cfg.paths.reports.join(SEARCH_FILE),
        &SearchFile {
            config_hash: hashes.search.clone(),
            points,
        },
    )
}

/// Accumulated metrics of one arm at one budget point.
#[derive(Debug, Default, Clone, Copy)]
struct ArmTally {
    flops: f64,
    full: f64,
    correct: usize,
    recall: f64,
    count: usize,
}

impl ArmTally {
    fn add(&mut self, model: &FlopsModel, schedule: &PruneSchedule, sample: &SceneSample, recall: f64) -> Result<(), CliError> {
        self.flops += model.visual_flops(Some(schedule))?;
        self.full += model.visual_flops(None)?;
        self.correct += teacher_answer_under_pruning(sample, schedule) as usize;
        self.recall += recall;
        self.count += 1;
        Ok(())
    }

    fn rows(&self, budget: f64, method: &str, out: &mut String) {
        let n = self.count.max(1) as f64;
        let reduction = if self.full > 0.0 { 1.0 - self.flops / self.full } else { 0.0 };
        for (metric, value) in [
            ("flops_reduction", reduction),
            ("accuracy", self.correct as f64 / n),
            ("topk_recall", self.recall / n),
        ] {
            let _ = writeln!(out, "{budget:.4},{method},{metric},{value}");
        }
    }
}

/// Ranking-only map that orders objects by a random permutation.
fn random_map(n: usize, rng: &mut ChaCha8Rng) -> ImportanceMap {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut raw = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        raw[i] = (n - rank) as f64;
    }
    ImportanceMap::normalize(&raw).expect("positive ranks")
}

pub const METHODS: [&str; 4] = ["gap_sap", "gap_fixed", "oracle_fixed", "random_fixed"];

/// Report body: `budget,method,metric,value` rows for every budget point.
pub fn evaluate_arms(
    cfg: &RunConfig,
    net: &GapNet,
    params: &GapParams,
    test: &[(SceneSample, ImportanceMap)],
    points: &[SearchPoint],
) -> Result<String, CliError> {
    if test.is_empty() {
        return Err(objprune::Error::EmptyDataset.into());
    }
    let k = cfg.eval.top_k;
    let depth = cfg.dims.depth;
    let preds = test
        .iter()
        .map(|(s, _)| net.predict(s, params))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::from("budget,method,metric,value\n");
    let mut unpruned = ArmTally::default();
    for (s, a) in test {
        let model = FlopsModel::new(cfg.dims, s.n_objects(), text_len(s));
        unpruned.add(&model, &PruneSchedule::unpruned(s.n_objects(), depth), s, top_k_recall(a, a, k))?;
    }
    unpruned.rows(0.0, "unpruned", &mut out);
    for (pi, point) in points.iter().enumerate() {
        let mut tallies = [ArmTally::default(); 4];
        let strategy = &point.result.strategy;
        for (((s, a), pred), i) in test.iter().zip(&preds).zip(0u64..) {
            let model = FlopsModel::new(cfg.dims, s.n_objects(), text_len(s));
            let fixed = |map: &ImportanceMap| {
                fixed_ratio_baseline(map, point.drop_layer, point.ratio, depth, cfg.eval.min_retain)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(sample_seed(cfg.seeds.eval, pi as u64), i));
            let random = random_map(s.n_objects(), &mut rng);
            let gap_recall = top_k_recall(pred, a, k);
            tallies[0].add(&model, &build_schedule(pred, strategy), s, gap_recall)?;
            tallies[1].add(&model, &fixed(pred), s, gap_recall)?;
            tallies[2].add(&model, &fixed(a), s, 1.0)?;
            tallies[3].add(&model, &fixed(&random), s, top_k_recall(&random, a, k))?;
        }
        for (t, m) in tallies.iter().zip(METHODS) {
            t.rows(point.average_pruning_ratio, m, &mut out);
        }
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let hashes = StageHashes::of(cfg);
    let (net, params) = load_model(cfg, &hashes)?;
    let test = load_pairs(cfg, &hashes, Split::Test)?;
    let search_path = cfg.paths.reports.join(SEARCH_FILE);
    let searched: SearchFile = read_json(&search_path)?;
    check_hash(&search_path, &searched.config_hash, &hashes.search)?;
    let body = evaluate_arms(cfg, &net, &params, &test, &searched.points)?;
    write_csv(&cfg.paths.reports.join(EVAL_FILE), &hashes.eval, &body)?;
    println!("wrote {}", cfg.paths.reports.join(EVAL_FILE).display());
    Ok(())
}

/// `(budget, method) -> metric -> value`.
pub type ReportTable = BTreeMap<(String, String), BTreeMap<String, f64>>;

/// Parses `budget,method,metric,value` rows.
pub fn parse_report(body: &str) -> Result<ReportTable, CliError> {
    let mut table = ReportTable::new();
    for line in body.lines().skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || objprune::Error::SchemaMismatch(format!("report row `{line}`"));
        if cols.len() != 4 {
            return Err(bad().into());
        }
        let value: f64 = cols[3].parse().map_err(|_| bad())?;
        table
            .entry((cols[0].to_string(), cols[1].to_string()))
            .or_default()
            .insert(cols[2].to_string(), value);
    }
    Ok(table)
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let hashes = StageHashes::of(cfg);
    let path = cfg.paths.reports.join(EVAL_FILE);
    let body = read_csv(&path, &hashes.eval)?;
    let table = parse_report(&body)?;
    let text = render_summary(&hashes.eval, &table);
    write_file(&cfg.paths.reports.join(SUMMARY_FILE), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn render_summary(hash: &str, table: &ReportTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Pruning evaluation\n\nconfig hash: `{hash}`\n");
    let _ = writeln!(out, "| budget | method | FLOPs reduction | accuracy | top-k recall |");
    let _ = writeln!(out, "|---|---|---|---|---|");
    for ((budget, method), m) in table {
        let get = |k: &str| m.get(k).map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "| {budget} | {method} | {} | {} | {} |",
            get("flops_reduction"),
            get("accuracy"),
            get("topk_recall")
        );
    }
    out
}
