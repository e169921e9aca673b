use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ovrescore::evaluation::{evaluate, latency_bench, score_stream_name};
use ovrescore::io::{
    load_bank, load_config_file, load_detections, load_eval, load_ground_truth, load_scene_spec, open_dump, save_bank,
    save_detections, to_json_bytes, write_json, AblationDoc, AblationRow, BenchDoc, DetectionsDoc, DumpHeader,
    DumpReader, DumpWriter, EvalDoc, GroundTruthDoc, ReportDoc,
};
use ovrescore::pipeline::{Engine, ImageOutput, Mode, PipelineConfig, Profile, Switches};
use ovrescore::prototypes::{compute_base_prototypes, extrapolate_novel_prototypes, BankProvenance, SamplingStrategy};
use ovrescore::synthetic::{generate_record, generate_space, SceneSpec};
use ovrescore::Error;
use rayon::prelude::*;

use crate::{
    AblateArgs, BenchArgs, CalibrateArgs, EvalArgs, Failure, PipelineArgs, ReportArgs, RunArgs, SynthArgs,
};

/// Images processed per parallel batch while streaming a dump.
const CHUNK: usize = 256;

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_flag<T: std::str::FromStr<Err = Error>>(value: &Option<String>) -> Result<Option<T>, Failure> {
    value
        .as_deref()
        .map(|v| v.parse::<T>().map_err(|e| usage(e.to_string())))
        .transpose()
}

/// Built-in defaults, then the profile, then the dump's temperature hint,
/// then the config file, then flags.
fn resolve_config(args: &PipelineArgs, dump_temperature: Option<f64>) -> Result<PipelineConfig, Failure> {
    let file = args.config.as_deref().map(load_config_file).transpose()?;
    let flag_profile: Option<Profile> = parse_flag(&args.profile)?;
    if let (Some(p), Some(f)) = (flag_profile, &file) {
        if f.profile.is_some_and(|fp| fp != p) {
            return Err(usage("profile/config conflict: --profile differs from the config file's profile"));
        }
        if f.overrides_profile_values() {
            return Err(usage("profile/config conflict: the config file sets k, alpha or gamma while --profile is given"));
        }
    }
    let profile = flag_profile.or(file.as_ref().and_then(|f| f.profile)).unwrap_or(Profile::Coco);
    let mut cfg = PipelineConfig::profile(profile);
    if let Some(t) = dump_temperature {
        cfg.temperature = t;
    }
    if let Some(f) = &file {
        cfg = f.apply(cfg);
    }
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.alpha, args.alpha);
    set(&mut cfg.gamma, args.gamma);
    set(&mut cfg.temperature, args.temperature);
    set(&mut cfg.proposal_nms_iou, args.proposal_nms);
    set(&mut cfg.class_nms_iou, args.class_nms);
    set(&mut cfg.score_threshold, args.score_threshold);
    cfg.k = args.k.unwrap_or(cfg.k);
    cfg.proposal_keep_max = args.keep_max.unwrap_or(cfg.proposal_keep_max);
    cfg.detections_per_image = args.detections_per_image.unwrap_or(cfg.detections_per_image);
    if let Some(m) = parse_flag::<Mode>(&args.mode)? {
        cfg.mode = m;
    }
    if args.no_arp_lq {
        cfg.switches.arp_lq = false;
    }
    if args.no_aoc_vs {
        cfg.switches.aoc_vs = false;
    }
    if args.no_aoc_lq {
        cfg.switches.aoc_lq = false;
    }
    if args.no_normalize {
        cfg.normalize_embeddings = false;
    }
    if args.trivial_offset.is_some() {
        cfg.novel_offset = args.trivial_offset;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn for_each_chunk<R: BufRead>(
    reader: DumpReader<R>,
    mut f: impl FnMut(Vec<ovrescore::pipeline::ImageRecord>) -> Result<(), Failure>,
) -> Outcome {
    let mut chunk = Vec::with_capacity(CHUNK);
    for record in reader {
        chunk.push(record?);
        if chunk.len() == CHUNK {
            f(std::mem::take(&mut chunk))?;
        }
    }
    if !chunk.is_empty() {
        f(chunk)?;
    }
    Ok(())
}

fn load_bank_for(path: Option<&Path>, cfg: &PipelineConfig) -> Result<Option<ovrescore::prototypes::PrototypeBank>, Failure> {
    let bank = path.map(load_bank).transpose()?;
    if bank.is_none() && cfg.switches.aoc_vs {
        return Err(usage("--bank is required unless --no-aoc-vs is given"));
    }
    Ok(bank)
}

pub fn calibrate(a: CalibrateArgs) -> Outcome {
    let strategy = match a.strategy.parse::<SamplingStrategy>().map_err(|e| usage(e.to_string()))? {
        SamplingStrategy::RandomN { n, .. } => SamplingStrategy::random(n, a.seed),
        other => other,
    };
    let reader = open_dump(&a.dump)?;
    let catalog = reader.catalog().clone();
    let samples = ovrescore::io::labeled_samples(reader, &catalog)?;
    let base = compute_base_prototypes(&samples, strategy)?;
    let target = if a.no_normalize { catalog } else { catalog.normalized() };
    let mut bank = extrapolate_novel_prototypes(&base, &target)?;
    bank.provenance = Some(BankProvenance {
        strategy,
        normalized_embeddings: !a.no_normalize,
    });
    save_bank(&a.out, &bank)?;
    Ok(())
}

pub fn run(a: RunArgs) -> Outcome {
    let reader = open_dump(&a.dump)?;
    let catalog = reader.catalog().clone();
    let cfg = resolve_config(&a.pipeline, reader.header().temperature)?;
    let bank = load_bank_for(a.bank.as_deref(), &cfg)?;
    let engine = Engine::new(&catalog, bank.as_ref(), cfg.clone())?;
    let mut outputs = Vec::new();
    for_each_chunk(reader, |chunk| {
        outputs.extend(engine.run_batch(&chunk)?.images);
        Ok(())
    })?;
    let provenance = bank.and_then(|b| b.provenance);
    let doc = DetectionsDoc::new(cfg, provenance, catalog.classes().to_vec(), outputs);
    save_detections(&a.out, &doc)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Outcome {
    let dets = load_detections(&a.dets)?;
    let gt = load_ground_truth(&a.gt)?;
    if dets.classes != gt.classes {
        return Err(Failure::Lib(Error::Contract(
            "detections and ground truth were produced for different class lists".into(),
        )));
    }
    let catalog = gt.catalog()?;
    let stream = score_stream_name(dets.config.switches);
    let outputs: Vec<ImageOutput> = dets.images.into_iter().map(Into::into).collect();
    let report = evaluate(&outputs, &gt.images, &catalog, stream)?;
    write_json(&a.out, &EvalDoc::new(dets.config, dets.bank, report))?;
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Outcome {
    let reader = open_dump(&a.dump)?;
    let catalog = reader.catalog().clone();
    let cfg = resolve_config(&a.pipeline, reader.header().temperature)?;
    if cfg.novel_offset.is_some() {
        return Err(usage("ablate does not combine with --trivial-offset"));
    }
    let bank = load_bank(&a.bank)?;
    let gt = load_ground_truth(&a.gt)?;
    if gt.classes != catalog.classes() {
        return Err(Failure::Lib(Error::Contract("ground truth was produced for a different class list".into())));
    }
    let engine = Engine::new(&catalog, Some(&bank), cfg.clone())?;
    let combos = Switches::all_combinations();
    let mut per_combo: Vec<Vec<ImageOutput>> = vec![Vec::new(); combos.len()];
    for_each_chunk(reader, |chunk| {
        let results: Vec<_> = chunk
            .par_iter()
            .map(|r| engine.run_image_ablation(r).map_err(|e| e.in_image(r.image_id)))
            .collect::<Result<_, _>>()?;
        for image in results {
            for (slot, (_, out)) in per_combo.iter_mut().zip(image) {
                slot.push(out);
            }
        }
        Ok(())
    })?;
    let gt_catalog = gt.catalog()?;
    let mut rows = Vec::with_capacity(combos.len());
    for (switches, outputs) in combos.into_iter().zip(per_combo) {
        let stream = score_stream_name(switches);
        let r = evaluate(&outputs, &gt.images, &gt_catalog, stream)?;
        rows.push(AblationRow {
            switches,
            map_novel: r.map_novel,
            map_base: r.map_base,
            map_all: r.map_all,
            max_recall: r.max_recall,
            recall_score_stream: r.recall_score_stream,
        });
    }
    write_json(&a.out, &AblationDoc::new(cfg, bank.provenance, rows))?;
    Ok(())
}

fn default_gt_path(dump: &Path) -> PathBuf {
    let mut name = dump.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".gt.json");
    dump.with_file_name(name)
}

pub fn synth(a: SynthArgs) -> Outcome {
    let mut spec = match &a.spec {
        Some(p) => load_scene_spec(p)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let (catalog, _, prototypes) = generate_space(&spec)?;
    let header = DumpHeader::from_catalog(&catalog, true, Some(spec.temperature));
    let mut ground_truth = Vec::with_capacity(a.images);
    let dump_path = &a.out;
    let file = std::fs::File::create(dump_path).map_err(|e| Error::Io {
        path: dump_path.clone(),
        source: e,
    })?;
    let mut writer = DumpWriter::new(std::io::BufWriter::new(file), &header)?;
    let mut start = 0;
    while start < a.images {
        let end = (start + CHUNK).min(a.images);
        let parts: Vec<_> = (start..end)
            .into_par_iter()
            .map(|i| generate_record(&spec, &catalog, &prototypes, i))
            .collect::<Result<_, _>>()?;
        for (record, gt) in parts {
            writer.write_record(&record)?;
            ground_truth.push(gt);
        }
        start = end;
    }
    let mut out = writer.finish()?;
    out.flush().map_err(|e| Error::Io {
        path: dump_path.clone(),
        source: e,
    })?;
    let gt_path = a.gt.unwrap_or_else(|| default_gt_path(dump_path));
    write_json(&gt_path, &GroundTruthDoc::new(catalog.classes().to_vec(), ground_truth))?;
    Ok(())
}

pub fn bench(a: BenchArgs) -> Outcome {
    let reader = open_dump(&a.dump)?;
    let catalog = reader.catalog().clone();
    let cfg = resolve_config(&a.pipeline, reader.header().temperature)?;
    let bank = load_bank(&a.bank)?;
    let engine = Engine::new(&catalog, Some(&bank), cfg.clone())?;
    let mut proposals = 0usize;
    let mut images = 0usize;
    let records = reader.take(a.images.unwrap_or(usize::MAX)).inspect(|r| {
        if let Ok(r) = r {
            proposals += r.proposals.len();
            images += 1;
        }
    });
    let summary = latency_bench(&engine, records, a.reps)?;
    let per_image = if images == 0 { 0.0 } else { proposals as f64 / images as f64 };
    let doc = BenchDoc::new(cfg, per_image, catalog.len(), catalog.dim(), summary);
    if let Some(out) = &a.out {
        write_json(out, &doc)?;
    }
    print_json(&doc)
}

fn print_json<T: serde::Serialize>(value: &T) -> Outcome {
    let bytes = to_json_bytes(value)?;
    std::io::stdout()
        .write_all(&bytes)
        .map_err(|e| Failure::Lib(Error::Io { path: "<stdout>".into(), source: e }))
}

pub fn report(a: ReportArgs) -> Outcome {
    let [baseline, aggregated] = a.evals.as_slice() else {
        return Err(usage(format!("report takes exactly two --eval files (baseline, aggregated), got {}", a.evals.len())));
    };
    let doc = ReportDoc::compare(&load_eval(baseline)?, &load_eval(aggregated)?)?;
    match &a.out {
        Some(out) => Ok(write_json(out, &doc)?),
        None => print_json(&doc),
    }
}
