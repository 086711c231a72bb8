use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use binderdiff::codec::{load_embeddings, write_embeddings, Codec, CodecRegistry};
use binderdiff::dataio::{
    cluster_split, ingest, parse_clusters, parse_fasta, write_rejections, BinderRecord, FastaFetcher, SplitManifest,
};
use binderdiff::denoiser::{load_checkpoint, write_checkpoint, DenoiserModel, PocketMask};
use binderdiff::diffusion::generate;
use binderdiff::explore::{explore_one, ExploreOutcome};
use binderdiff::metrics::{CoordSet, MetricInput, MetricRegistry};
use binderdiff::trainer::{train, write_loss_csv, NormStats, TrainingExample};
use binderdiff::{seed, EmbeddingMatrix, Error, PeptideSequence};
use indexmap::IndexMap;
use log::{info, warn};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::io::{existing, input, io_err, tsv_row, write_atomic, write_text};
use crate::{
    CliError, CliResult, Command, DecodeArgs, EncodeArgs, EvalArgs, ExploreArgs, FetchArgs, ReceptorArgs, SampleArgs,
    ScheduleDumpArgs, SplitArgs, TrainArgs,
};

const DEFAULT_CACHE_DIR: &str = "binderdiff-cache";

pub struct Context<'a> {
    pub cfg: RunConfig,
    pub codecs: &'a CodecRegistry,
    pub cache_dir: Option<PathBuf>,
}

impl Context<'_> {
    fn codec(&self) -> CliResult<Box<dyn Codec>> {
        Ok(self.codecs.build(&self.cfg.data.codec, &self.cfg.data.codec_params)?)
    }

    fn fetcher(&self, offline: bool) -> FastaFetcher {
        let dir = self
            .cache_dir
            .clone()
            .or_else(|| self.cfg.paths.cache_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR));
        FastaFetcher::new(dir, offline)
    }
}

pub fn dispatch(ctx: &Context, cmd: &Command) -> CliResult {
    match cmd {
        Command::Split(a) => split(ctx, a),
        Command::Encode(a) => encode(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::Sample(a) => sample(ctx, a),
        Command::Explore(a) => explore(ctx, a),
        Command::Decode(a) => decode(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::ScheduleDump(a) => schedule_dump(ctx, a),
        Command::Fetch(a) => fetch(ctx, a),
    }
}

fn load_records(path: &Path) -> CliResult<Vec<BinderRecord>> {
    let report = ingest(path)?;
    if !report.rejected.is_empty() {
        info!("{} records rejected during cleaning", report.rejected.len());
    }
    Ok(report.records)
}

fn split(ctx: &Context, a: &SplitArgs) -> CliResult {
    let records_path = input(&a.records, &ctx.cfg.paths.records, "records")?;
    let clusters_path = input(&a.clusters, &ctx.cfg.paths.clusters, "clusters")?;
    let report = ingest(&records_path)?;
    let clusters = parse_clusters(&clusters_path)?;
    let manifest = cluster_split(&report.records, &clusters, &ctx.cfg.data.split, ctx.cfg.seed)?;
    if let Some(p) = &a.rejections {
        write_atomic(p, |w| Ok(write_rejections(&report.rejected, w)?))?;
    }
    write_text(&a.out, &manifest.to_json()?)?;
    info!(
        "kept {} of {} records; train {} / val {} / test {} ({} / {} / {} clusters)",
        report.records.len(),
        report.records.len() + report.rejected.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        manifest.clusters.train.len(),
        manifest.clusters.val.len(),
        manifest.clusters.test.len()
    );
    Ok(())
}

fn sequence(id: &str, s: &str) -> CliResult<PeptideSequence> {
    PeptideSequence::new(s).map_err(|e| CliError::Usage(format!("sequence {id}: {e}")))
}

fn encode(ctx: &Context, a: &EncodeArgs) -> CliResult {
    let codec = ctx.codec()?;
    let mut out = IndexMap::new();
    if let Some(fasta) = &a.fasta {
        for (id, s) in parse_fasta(&existing(fasta, "fasta")?)? {
            out.insert(id.clone(), codec.encode(&sequence(&id, &s)?)?);
        }
    } else {
        let path = input(&a.records, &ctx.cfg.paths.records, "records")?;
        for r in load_records(&path)? {
            out.insert(format!("{}:receptor", r.pdb_id), codec.encode(&r.receptor()?)?);
            out.insert(format!("{}:binder", r.pdb_id), codec.encode(&r.binder()?)?);
        }
    }
    save_atomic_embeddings(&out, &a.out)?;
    info!("encoded {} entries with codec {}", out.len(), codec.name());
    Ok(())
}

fn save_atomic_embeddings(map: &IndexMap<String, EmbeddingMatrix>, path: &Path) -> CliResult {
    write_atomic(path, |w| Ok(write_embeddings(map, w)?))
}

fn train_cmd(ctx: &Context, a: &TrainArgs) -> CliResult {
    let cfg = &ctx.cfg;
    let records_path = input(&a.records, &cfg.paths.records, "records")?;
    let manifest_path = input(&a.manifest, &cfg.paths.manifest, "manifest")?;
    let manifest_text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    let manifest = SplitManifest::from_json(&manifest_text)?;
    let records = load_records(&records_path)?;
    let by_id: HashMap<&str, &BinderRecord> = records.iter().map(|r| (r.pdb_id.as_str(), r)).collect();

    let resume = a.resume.as_ref().map(|p| existing(p, "resume")).transpose()?;
    let mut model = match &resume {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if m.config != cfg.model {
                warn!("checkpoint model configuration differs from the run configuration; using the checkpoint's");
            }
            m
        }
        None => DenoiserModel::init(cfg.model.clone())?,
    };
    let sched = cfg.schedule()?;
    if model.config.timesteps != sched.timesteps() {
        return Err(Error::Config(format!(
            "checkpoint expects {} timesteps, schedule has {}",
            model.config.timesteps,
            sched.timesteps()
        ))
        .into());
    }

    let external = a
        .embeddings
        .as_ref()
        .or(cfg.paths.embeddings.as_ref())
        .map(|p| existing(p, "embeddings").and_then(|p| Ok(load_embeddings(&p)?)))
        .transpose()?;
    let codec = if external.is_none() { Some(ctx.codec()?) } else { None };
    let rows = cfg.data.binder_length + 1;
    let mut data = Vec::new();
    let mut skipped = 0;
    for id in &manifest.train {
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| CliError::Usage(format!("manifest id {id} is not among the cleaned records")))?;
        let (receptor, binder) = match (&external, &codec) {
            (Some(map), _) => {
                let get = |k: String| {
                    map.get(&k)
                        .cloned()
                        .ok_or_else(|| CliError::Usage(format!("embeddings lack entry {k}")))
                };
                (get(format!("{id}:receptor"))?, get(format!("{id}:binder"))?)
            }
            (None, Some(c)) => (c.encode(&rec.receptor()?)?, c.encode(&rec.binder()?)?),
            (None, None) => unreachable!(),
        };
        if binder.rows() != rows {
            skipped += 1;
            continue;
        }
        let mask = PocketMask::from_indices(receptor.rows(), &rec.pocket_indices)?;
        data.push(TrainingExample { receptor, mask, binder });
    }
    if skipped > 0 {
        info!(
            "skipped {skipped} training records whose binder is not {} residues",
            cfg.data.binder_length
        );
    }
    if data.is_empty() {
        return Err(CliError::Usage(format!(
            "no training records with {}-residue binders",
            cfg.data.binder_length
        )));
    }
    if resume.is_none() {
        let binders: Vec<&EmbeddingMatrix> = data.iter().map(|e| &e.binder).collect();
        model.norm_stats = NormStats::fit(&binders)?;
    }
    info!(
        "training {} parameters on {} examples from epoch {}",
        model.parameter_count(),
        data.len(),
        model.epochs_completed
    );
    let history = train(&mut model, &data, &sched, &cfg.train)?;

    write_atomic(&a.out, |w| Ok(write_checkpoint(&model, w)?))?;
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_atomic(&loss_path, |w| write_loss_csv(&history, w).map_err(io_err(&loss_path)))?;
    if let Some(last) = history.last() {
        info!("final epoch {} loss {:.6}", last.epoch, last.mean_loss);
    }
    Ok(())
}

/// Parses 1-based pocket residues into 0-based indices. Items are `N`,
/// `N-M`, optionally with residue letters (`A67-G74`) that must match.
pub fn parse_pocket(spec: &str, receptor: &PeptideSequence) -> CliResult<Vec<usize>> {
    let bad = |m: String| CliError::Usage(format!("pocket {spec:?}: {m}"));
    let position = |tok: &str| -> CliResult<usize> {
        let tok = tok.trim();
        let (letter, digits) = match tok.chars().next() {
            Some(c) if c.is_ascii_alphabetic() => (Some(c.to_ascii_uppercase()), &tok[1..]),
            _ => (None, tok),
        };
        let n: usize = digits.parse().map_err(|_| bad(format!("cannot read residue {tok:?}")))?;
        if n == 0 || n > receptor.len() {
            return Err(bad(format!("residue {n} outside 1..={}", receptor.len())));
        }
        let actual = receptor.as_bytes()[n - 1] as char;
        if let Some(l) = letter {
            if l != actual {
                return Err(bad(format!("residue {n} is {actual}, not {l}")));
            }
        }
        Ok(n - 1)
    };
    let mut out = Vec::new();
    for item in spec.split(',').filter(|s| !s.trim().is_empty()) {
        match item.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (position(a)?, position(b)?);
                if a > b {
                    return Err(bad(format!("range {item:?} is reversed")));
                }
                out.extend(a..=b);
            }
            None => out.push(position(item)?),
        }
    }
    if out.is_empty() {
        return Err(bad("no residues".into()));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn pick_chain(entries: BTreeMap<String, String>, chain: Option<&str>, source: &str) -> CliResult<(String, String)> {
    match chain {
        Some(c) => entries
            .into_iter()
            .find(|(id, _)| id == c || id.split('|').next() == Some(c))
            .ok_or_else(|| CliError::Usage(format!("{source} has no entry {c:?}"))),
        None if entries.len() == 1 => Ok(entries.into_iter().next().expect("one entry")),
        None => Err(CliError::Usage(format!(
            "{source} has {} entries; choose one with --chain ({})",
            entries.len(),
            entries.keys().cloned().collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn receptor_sequence(ctx: &Context, a: &ReceptorArgs) -> CliResult<PeptideSequence> {
    if let Some(s) = &a.receptor {
        return sequence("receptor", &s.to_ascii_uppercase());
    }
    let (entries, source) = if let Some(p) = &a.receptor_fasta {
        (parse_fasta(&existing(p, "receptor-fasta")?)?, p.display().to_string())
    } else if let Some(id) = &a.pdb_id {
        (ctx.fetcher(false).fetch(id)?, id.clone())
    } else {
        return Err(CliError::Usage("give --receptor, --receptor-fasta or --pdb-id".into()));
    };
    let (id, s) = pick_chain(entries, a.chain.as_deref(), &source)?;
    sequence(&id, &s)
}

fn decode_row(w: &mut dyn std::io::Write, id: &str, extra: &[&str], codec: &dyn Codec, x: &EmbeddingMatrix) -> std::io::Result<()> {
    let (status, seq, detail) = match codec.decode(x) {
        Ok(s) => ("ok".to_string(), s.to_string(), String::new()),
        Err(why) => ("decode-failed".to_string(), String::new(), why.to_string()),
    };
    let mut fields = vec![id];
    fields.extend_from_slice(extra);
    fields.extend_from_slice(&[&status, &seq, &detail]);
    tsv_row(w, &fields)
}

fn sample(ctx: &Context, a: &SampleArgs) -> CliResult {
    let cfg = &ctx.cfg;
    let ckpt = input(&a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let length = a.length.unwrap_or(cfg.data.binder_length);
    if length == 0 || a.count == 0 {
        return Err(CliError::Usage("--count and --length must be at least 1".into()));
    }
    let receptor = receptor_sequence(ctx, &a.receptor)?;
    let pocket = parse_pocket(&a.receptor.pocket, &receptor)?;
    let model = load_checkpoint(&ckpt)?;
    let codec = ctx.codec()?;
    if codec.d_emb() != model.config.d_emb {
        return Err(Error::DimensionMismatch {
            expected: model.config.d_emb,
            found: codec.d_emb(),
        }
        .into());
    }
    let sched = binderdiff::NoiseSchedule::cosine(model.config.timesteps, cfg.schedule.offset)?;
    let z = codec.encode(&receptor)?;
    let mask = PocketMask::from_indices(z.rows(), &pocket)?;
    info!(
        "sampling {} binders of length {length} for a {}-residue receptor with {} pocket residues",
        a.count,
        receptor.len(),
        pocket.len()
    );

    let samples: Vec<(u64, EmbeddingMatrix)> = (0..a.count)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive(cfg.seed, i as u64);
            Ok((s, generate(&model, &z, &mask, length + 1, &sched, s)?))
        })
        .collect::<binderdiff::Result<_>>()?;

    let width = (a.count - 1).to_string().len().max(4);
    let ids: Vec<String> = (0..a.count).map(|i| format!("sample_{i:0width$}")).collect();
    write_atomic(&a.out, |w| {
        let e = io_err(&a.out);
        tsv_row(w, &["id", "seed", "status", "sequence", "detail"]).map_err(&e)?;
        for (id, (s, x)) in ids.iter().zip(&samples) {
            decode_row(w, id, &[&s.to_string()], codec.as_ref(), x).map_err(&e)?;
        }
        Ok(())
    })?;
    if let Some(p) = &a.out_embeddings {
        let map: IndexMap<String, EmbeddingMatrix> = ids.iter().cloned().zip(samples.into_iter().map(|(_, x)| x)).collect();
        save_atomic_embeddings(&map, p)?;
    }
    Ok(())
}

fn explore(ctx: &Context, a: &ExploreArgs) -> CliResult {
    let cfg = &ctx.cfg;
    let path = input(&a.embeddings, &cfg.paths.embeddings, "embeddings")?;
    let entries = load_embeddings(&path)?;
    let codec = ctx.codec()?;
    let items: Vec<(&String, &EmbeddingMatrix)> = entries.iter().collect();
    let outcomes: Vec<ExploreOutcome> = items
        .par_iter()
        .enumerate()
        .map(|(i, (_, x))| {
            let mut rng = seed::rng(seed::derive(cfg.explore.seed, i as u64));
            explore_one(x, codec.as_ref(), &cfg.explore, &mut rng)
        })
        .collect::<binderdiff::Result<_>>()?;
    write_atomic(&a.out, |w| {
        let e = io_err(&a.out);
        tsv_row(w, &["id", "status", "sequence", "sigma_used", "attempts", "levels"]).map_err(&e)?;
        for ((id, _), o) in items.iter().zip(&outcomes) {
            let row = match o {
                ExploreOutcome::Found {
                    sequence,
                    sigma_used,
                    attempts,
                } => [
                    "found".to_string(),
                    sequence.to_string(),
                    format!("{sigma_used:.2}"),
                    attempts.to_string(),
                    String::new(),
                ],
                ExploreOutcome::Exhausted { levels, attempts } => [
                    "exhausted".to_string(),
                    String::new(),
                    String::new(),
                    attempts.to_string(),
                    levels.to_string(),
                ],
            };
            let mut fields = vec![id.as_str()];
            fields.extend(row.iter().map(String::as_str));
            tsv_row(w, &fields).map_err(&e)?;
        }
        Ok(())
    })?;
    let found = outcomes.iter().filter(|o| matches!(o, ExploreOutcome::Found { .. })).count();
    info!("{found} of {} embeddings yielded a sequence", outcomes.len());
    Ok(())
}

fn decode(ctx: &Context, a: &DecodeArgs) -> CliResult {
    let path = input(&a.embeddings, &ctx.cfg.paths.embeddings, "embeddings")?;
    let entries = load_embeddings(&path)?;
    let codec = ctx.codec()?;
    write_atomic(&a.out, |w| {
        let e = io_err(&a.out);
        tsv_row(w, &["id", "status", "sequence", "detail"]).map_err(&e)?;
        for (id, x) in &entries {
            decode_row(w, id, &[], codec.as_ref(), x).map_err(&e)?;
        }
        Ok(())
    })
}

fn eval(ctx: &Context, a: &EvalArgs) -> CliResult {
    let cfg = &ctx.cfg;
    let mut input = MetricInput::default();
    let mut ids: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut notes: BTreeMap<&str, String> = BTreeMap::new();
    if let Some(p) = &a.sequences {
        let entries = parse_fasta(&existing(p, "sequences")?)?;
        let seqs = entries
            .iter()
            .map(|(id, s)| sequence(id, s))
            .collect::<CliResult<Vec<_>>>()?;
        ids.insert("div_seq", entries.keys().cloned().collect());
        input.sequences = Some(seqs);
    }
    if let Some(p) = &a.embeddings {
        let entries = load_embeddings(&existing(p, "embeddings")?)?;
        ids.insert("div_emb", entries.keys().cloned().collect());
        input.embeddings = Some(entries.into_values().collect());
    } else if let Some(seqs) = &input.sequences {
        let codec = ctx.codec()?;
        input.embeddings = Some(seqs.iter().map(|s| codec.encode(s)).collect::<binderdiff::Result<_>>()?);
        ids.insert("div_emb", ids["div_seq"].clone());
        notes.insert("div_emb", format!("embeddings computed with the {} codec", codec.name()));
    }
    if let Some(p) = &a.structures {
        let text = std::fs::read_to_string(existing(p, "structures")?).map_err(|e| CliError::io(p.display().to_string(), e))?;
        let structures: BTreeMap<String, CoordSet> = serde_json::from_str(&text).map_err(Error::from)?;
        ids.insert("div_str", structures.keys().cloned().collect());
        input.structures = Some(structures.into_values().collect());
    }

    let registry = MetricRegistry::with_defaults(cfg.metrics.gaps);
    let mut report = serde_json::Map::new();
    for name in &cfg.metrics.metrics {
        let metric = registry.get(name)?;
        let Some(item_ids) = ids.get(name.as_str()) else {
            info!("skipping {name}: no input");
            continue;
        };
        let mut r = metric.evaluate(&input, cfg.metrics.write_matrices || a.matrix_dir.is_some())?;
        if let Some(dir) = &a.matrix_dir {
            let path = dir.join(format!("{name}_similarity.csv"));
            write_atomic(&path, |w| Ok(r.write_matrix_csv(item_ids, w)?))?;
        }
        if !cfg.metrics.write_matrices {
            r.matrix = None;
        }
        if let Some(n) = notes.get(name.as_str()) {
            r.note = Some(match r.note.take() {
                Some(old) => format!("{old}; {n}"),
                None => n.clone(),
            });
        }
        info!("{name}: {:.4} ± {:.4} over {} items", r.mean, r.std, r.n);
        report.insert(name.clone(), serde_json::to_value(&r).map_err(Error::from)?);
    }
    if report.is_empty() {
        return Err(CliError::Usage("nothing to evaluate; pass --sequences, --embeddings or --structures".into()));
    }
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    write_text(&a.out, &text)
}

fn schedule_dump(ctx: &Context, a: &ScheduleDumpArgs) -> CliResult {
    let sched = ctx.cfg.schedule()?;
    match &a.out {
        Some(p) => write_atomic(p, |w| sched.write_csv(w).map_err(io_err(p))),
        None => sched
            .write_csv(std::io::stdout().lock())
            .map_err(|e| CliError::io("writing schedule", e)),
    }
}

fn fetch(ctx: &Context, a: &FetchArgs) -> CliResult {
    let mut fetcher = ctx.fetcher(a.offline);
    if let Some(u) = &a.base_url {
        fetcher = fetcher.with_base_url(u.clone());
    }
    let mut all = Vec::new();
    for id in &a.ids {
        for (chain, seq) in fetcher.fetch(id)? {
            println!("{chain}\t{}", seq.len());
            all.push((chain, seq));
        }
    }
    if let Some(p) = &a.out {
        let mut text = String::new();
        for (chain, seq) in &all {
            text.push_str(&format!(">{chain}\n{seq}\n"));
        }
        write_text(p, &text)?;
    }
    Ok(())
}
