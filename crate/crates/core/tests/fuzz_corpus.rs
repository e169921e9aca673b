//! Replays the checked-in fuzz corpus seeds through the same checks the
//! fuzz targets make. `OVRESCORE_BLESS=1` regenerates the seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ovrescore::evaluation::evaluate;
use ovrescore::io::{
    encode_dump, parse_bank, parse_config_text, parse_detections, parse_dump, parse_eval, parse_ground_truth,
    to_json_bytes, BankDoc, ConfigFile, DetectionsDoc, DumpHeader, EvalDoc, GroundTruthDoc,
};
use ovrescore::pipeline::{Engine, Mode, PipelineConfig, Profile};
use ovrescore::prototypes::{compute_base_prototypes, extrapolate_novel_prototypes, BankProvenance, SamplingStrategy};
use ovrescore::synthetic::{generate_dataset, SceneSpec};

fn corpus_dir(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target)
}

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(corpus_dir(target))
        .unwrap_or_else(|e| panic!("corpus for {target}: {e}"))
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn generate_seeds() -> BTreeMap<(&'static str, &'static str), Vec<u8>> {
    let spec = SceneSpec {
        dim: 4,
        base_classes: 2,
        novel_classes: 1,
        min_objects: 1,
        max_objects: 2,
        proposals_per_object: 2,
        background_blobs: 1,
        samples_per_class: 3,
        ..SceneSpec::default()
    };
    let ds = generate_dataset(&spec, 2).unwrap();
    let header = DumpHeader::from_catalog(&ds.catalog, true, Some(spec.temperature));
    let dump = encode_dump(&header, &ds.records).unwrap();
    let strategy = SamplingStrategy::random(2, 1);
    let base = compute_base_prototypes(&ds.samples, strategy).unwrap();
    let mut bank = extrapolate_novel_prototypes(&base, &ds.catalog.normalized()).unwrap();
    bank.provenance = Some(BankProvenance {
        strategy,
        normalized_embeddings: true,
    });
    let cfg = PipelineConfig {
        temperature: spec.temperature,
        ..PipelineConfig::default()
    };
    let engine = Engine::new(&ds.catalog, Some(&bank), cfg.clone()).unwrap();
    let outputs = engine.run_batch(&ds.records).unwrap().images;
    let dets = DetectionsDoc::new(cfg.clone(), bank.provenance.clone(), ds.catalog.classes().to_vec(), outputs.clone());
    let gt = GroundTruthDoc::new(ds.catalog.classes().to_vec(), ds.ground_truth.clone());
    let report = evaluate(&outputs, &ds.ground_truth, &ds.catalog, "aggregated_objectness").unwrap();
    let eval = EvalDoc::new(cfg, bank.provenance.clone(), report);

    let mut bad_version = dump.clone();
    bad_version[8] = b'2';
    let mut seeds = BTreeMap::new();
    seeds.insert(("dump", "valid_two_images.bin"), dump.clone());
    seeds.insert(("dump", "header_only.bin"), encode_dump(&header, &[]).unwrap());
    seeds.insert(("dump", "truncated.bin"), dump[..dump.len() - 9].to_vec());
    seeds.insert(("dump", "unsupported_version.bin"), bad_version);
    seeds.insert(("bank", "valid.json"), to_json_bytes(&BankDoc::from_bank(&bank)).unwrap());
    seeds.insert(("detections", "valid.json"), to_json_bytes(&dets).unwrap());
    seeds.insert(
        ("detections", "empty.json"),
        to_json_bytes(&DetectionsDoc::new(PipelineConfig::default(), None, vec![], vec![])).unwrap(),
    );
    seeds.insert(("ground_truth", "valid.json"), to_json_bytes(&gt).unwrap());
    seeds.insert(("eval_report", "valid.json"), to_json_bytes(&eval).unwrap());
    seeds.insert(("config", "pipeline.toml"), b"profile = \"lvis\"\nmode = \"sparse\"\ndetections_per_image = 100\n[switches]\narp_lq = true\naoc_vs = false\naoc_lq = true\n".to_vec());
    seeds.insert(("config", "scene.json"), serde_json::to_vec_pretty(&spec).unwrap());
    seeds.insert(("config", "scene.toml"), b"seed = 4\ndim = 8\nobject_size = [0.1, 0.3]\n[novel_objectness]\nmean = 0.2\nconcentration = 2.0\n".to_vec());
    seeds.insert(("strategy", "random.txt"), b"random:300".to_vec());
    seeds.insert(("strategy", "topk.txt"), b"topk:25".to_vec());
    seeds.insert(("strategy", "mode.txt"), b"sparse".to_vec());
    seeds
}

#[test]
fn corpus_seeds_replay() {
    if std::env::var_os("OVRESCORE_BLESS").is_some() {
        for ((target, name), bytes) in generate_seeds() {
            std::fs::create_dir_all(corpus_dir(target)).unwrap();
            std::fs::write(corpus_dir(target).join(name), bytes).unwrap();
        }
    }

    let mut parsed = 0;
    for (name, data) in seeds("dump") {
        if let Ok((header, records)) = parse_dump(&data) {
            let again = encode_dump(&header, &records).unwrap();
            assert_eq!(again, data, "{name} re-encodes byte-identically");
            parsed += 1;
        }
    }
    assert_eq!(parsed, 2);

    for (_, data) in seeds("bank") {
        let bank = parse_bank(&data).unwrap();
        assert_eq!(to_json_bytes(&BankDoc::from_bank(&bank)).unwrap(), data);
    }
    for (_, data) in seeds("detections") {
        let doc = parse_detections(&data).unwrap();
        assert_eq!(to_json_bytes(&doc).unwrap(), data);
    }
    for (_, data) in seeds("ground_truth") {
        let doc = parse_ground_truth(&data).unwrap();
        assert_eq!(to_json_bytes(&doc).unwrap(), data);
    }
    for (_, data) in seeds("eval_report") {
        let doc = parse_eval(&data).unwrap();
        assert_eq!(to_json_bytes(&doc).unwrap(), data);
    }
    for (name, data) in seeds("config") {
        let text = std::str::from_utf8(&data).unwrap();
        let toml = name.ends_with(".toml");
        let ok = parse_config_text::<ConfigFile>(text, toml, &name)
            .map(|c| c.apply(PipelineConfig::default()).validate().is_ok())
            .unwrap_or(false)
            || parse_config_text::<SceneSpec>(text, toml, &name).map(|s| s.validate().is_ok()).unwrap_or(false);
        assert!(ok, "{name} parses as a config or scene spec");
    }
    for (name, data) in seeds("strategy") {
        let text = std::str::from_utf8(&data).unwrap();
        let ok = text.parse::<SamplingStrategy>().is_ok() || text.parse::<Mode>().is_ok() || text.parse::<Profile>().is_ok();
        assert!(ok, "{name}");
    }
}
