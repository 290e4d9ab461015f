use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dialdesc::data::dataset::{build_dataset, parse_coco_captions, parse_visdial, stats_table};
use dialdesc::data::{encode_example, read_corpus, write_corpus, CorpusRecord, EncodedExample, Vocabulary};
use dialdesc::exec::par_map;
use dialdesc::inference::{beam_search, dump_attention, generate_all, greedy_decode, resolve_copies, BeamHypothesis};
use dialdesc::metrics::{evaluate_texts, EvalReport};
use dialdesc::training::{corpus_loss, load_checkpoint, save_checkpoint, Checkpoint, Trainer};
use dialdesc::{Error, Execution, Model, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const HYPOTHESES: &str = "hypotheses.jsonl";
pub const GREEDY: &str = "greedy.jsonl";
pub const KBEST: &str = "kbest.jsonl";
pub const REPORT: &str = "report.json";
pub const LOSS_LOG: &str = "loss.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const SWEEP_TABLE: &str = "beam_sweep.tsv";
pub const STATS: &str = "dataset_stats.txt";

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisLine {
    pub id: String,
    pub text: String,
}

#[derive(Serialize)]
struct KBestLine<'a> {
    id: &'a str,
    rank: usize,
    score: f64,
    finished: bool,
    text: String,
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {what} {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn encode_all(records: &[CorpusRecord], vocab: &Vocabulary, cfg: &RunConfig) -> Vec<EncodedExample> {
    records.iter().map(|r| encode_example(r, vocab, cfg.limits())).collect()
}

fn load_model(cfg: &RunConfig) -> Result<(Checkpoint, Model)> {
    let ck = load_checkpoint(&cfg.paths.checkpoint)?;
    let model = ck.model()?;
    Ok((ck, model))
}

fn text(ids: &[usize], vocab: &Vocabulary, ex: &EncodedExample) -> Result<String> {
    Ok(resolve_copies(ids, vocab, &ex.ext)?.join(" "))
}

pub fn build(cfg: &RunConfig) -> Result<()> {
    let dlg = cfg.require(&cfg.paths.dialogues, "dialogues")?;
    let cap = cfg.require(&cfg.paths.captions, "captions")?;
    let dialogues = parse_visdial(&read_text(dlg, "dialogue file")?)?;
    let captions = parse_coco_captions(&read_text(cap, "caption file")?)?;
    let built = build_dataset(&dialogues, &captions, &cfg.build_options())?;
    let dev = cfg.require(&cfg.paths.dev, "dev")?;
    let test = cfg.require(&cfg.paths.test, "test")?;
    for (path, recs) in [(cfg.paths.train.as_path(), &built.train), (dev, &built.dev), (test, &built.test)] {
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        write_corpus(path, recs)?;
    }
    let table = stats_table(&built.stats);
    create(&cfg.paths.out_dir.join(STATS))?.write_all(table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn fmt_loss(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let exec = Execution::default();
    let train_recs = read_corpus(&cfg.paths.train)?;
    let dev_recs = match &cfg.paths.dev {
        Some(p) => read_corpus(p)?,
        None => Vec::new(),
    };
    let mut trainer = if resume {
        let ck = load_checkpoint(&cfg.paths.checkpoint)?;
        let mut expected = cfg.model.clone();
        expected.vocab_size = ck.vocab.len();
        ck.model_for(&expected)?;
        if expected != ck.config {
            return Err(Error::Config("[model] differs from the checkpoint being resumed".into()));
        }
        (Trainer::resume(ck.clone(), cfg.train.clone(), exec)?, ck.vocab)
    } else {
        let vocab = Vocabulary::build(&train_recs, cfg.model.vocab_size)?;
        let mut mc = cfg.model.clone();
        mc.vocab_size = vocab.len();
        (Trainer::new(Model::new(mc, cfg.seed)?, cfg.train.clone(), exec)?, vocab)
    };
    let vocab = trainer.1.clone();
    let train = encode_all(&train_recs, &vocab, cfg);
    let dev = encode_all(&dev_recs, &vocab, cfg);

    fs::create_dir_all(&cfg.paths.out_dir)?;
    let log_path = cfg.paths.out_dir.join(LOSS_LOG);
    let fresh = !resume || !log_path.exists();
    let mut log = OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(&log_path)?;
    if fresh {
        writeln!(log, "step train_loss dev_loss")?;
    }
    let best_path = cfg.paths.out_dir.join(BEST_CHECKPOINT);
    let mut best = f64::INFINITY;
    let every = cfg.train.checkpoint_every;
    let ckpt = cfg.paths.checkpoint.clone();
    let curve = trainer.0.run(&train, &dev, |t, p| {
        writeln!(log, "{} {:.6} {}", p.step, p.train_loss, fmt_loss(p.dev_loss))?;
        log.flush()?;
        if every > 0 && p.step % every == 0 {
            save_checkpoint(&ckpt, &t.model, &vocab, Some(&t.optimizer), &t.progress)?;
        }
        if let Some(d) = p.dev_loss {
            if d < best {
                best = d;
                save_checkpoint(&best_path, &t.model, &vocab, Some(&t.optimizer), &t.progress)?;
            }
        }
        Ok(())
    })?;
    let t = &trainer.0;
    save_checkpoint(&ckpt, &t.model, &vocab, Some(&t.optimizer), &t.progress)?;
    let nll = corpus_loss(&t.model, &train, exec)?;
    let dev_loss = curve.last().and_then(|p| p.dev_loss);
    println!("step={} train_nll={nll:.6} dev_nll={}", t.progress.step, fmt_loss(dev_loss));
    Ok(())
}

fn corpus_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.require(&cfg.paths.test, "test")
}

pub fn generate(cfg: &RunConfig, greedy: bool) -> Result<()> {
    let exec = Execution::default();
    let (ck, model) = load_model(cfg)?;
    let records = read_corpus(corpus_path(cfg)?)?;
    let examples = encode_all(&records, &ck.vocab, cfg);
    let dir = &cfg.paths.out_dir;
    if greedy {
        let hyps: Vec<Result<BeamHypothesis>> = par_map(exec, &examples, |ex| greedy_decode(&model, &model.memory_context(ex)?));
        let mut w = create(&dir.join(GREEDY))?;
        for (ex, h) in examples.iter().zip(hyps) {
            let line = HypothesisLine {
                id: ex.id.clone(),
                text: text(&h?.tokens, &ck.vocab, ex)?,
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w)?;
        }
        w.flush()?;
        println!("wrote {} greedy hypotheses to {}", examples.len(), dir.join(GREEDY).display());
        return Ok(());
    }
    let results = generate_all(&model, &examples, cfg.beam, exec)?;
    let mut w = create(&dir.join(HYPOTHESES))?;
    let mut kw = create(&dir.join(KBEST))?;
    for (ex, r) in examples.iter().zip(&results) {
        let line = HypothesisLine {
            id: ex.id.clone(),
            text: text(&r.best.tokens, &ck.vocab, ex)?,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
        for (rank, h) in r.kbest.iter().enumerate() {
            let k = KBestLine {
                id: &ex.id,
                rank: rank + 1,
                score: h.log_prob,
                finished: h.finished,
                text: text(&h.tokens, &ck.vocab, ex)?,
            };
            serde_json::to_writer(&mut kw, &k)?;
            writeln!(kw)?;
        }
    }
    w.flush()?;
    kw.flush()?;
    println!("wrote {} hypotheses (K={}) to {}", examples.len(), cfg.beam, dir.join(HYPOTHESES).display());
    Ok(())
}

fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisLine>> {
    let text = read_text(path, "hypothesis file")?;
    let lines: Vec<HypothesisLine> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1))))
        .collect::<Result<_>>()?;
    if lines.is_empty() {
        return Err(Error::Data(format!("hypothesis file {} is empty", path.display())));
    }
    Ok(lines)
}

fn score(hyps: &[HypothesisLine], records: &[CorpusRecord]) -> Result<EvalReport> {
    if hyps.len() != records.len() {
        return Err(Error::Data(format!("{} hypotheses for {} reference records", hyps.len(), records.len())));
    }
    for (n, (h, r)) in hyps.iter().zip(records).enumerate() {
        if h.id != r.id {
            return Err(Error::Data(format!("hypothesis {} has id {:?}, reference has {:?}", n + 1, h.id, r.id)));
        }
    }
    let ids: Vec<String> = hyps.iter().map(|h| h.id.clone()).collect();
    let texts: Vec<String> = hyps.iter().map(|h| h.text.clone()).collect();
    let refs: Vec<Vec<String>> = records
        .iter()
        .map(|r| r.reference_texts().into_iter().map(str::to_string).collect())
        .collect();
    evaluate_texts(&ids, &texts, &refs, Execution::default())
}

pub fn evaluate(cfg: &RunConfig, hyps: Option<PathBuf>) -> Result<()> {
    let path = hyps.unwrap_or_else(|| cfg.paths.out_dir.join(HYPOTHESES));
    let lines = read_hypotheses(&path)?;
    let records = read_corpus(corpus_path(cfg)?)?;
    let report = score(&lines, &records)?;
    let out = cfg.paths.out_dir.join(REPORT);
    let mut w = create(&out)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    print!("{}", report.table());
    Ok(())
}

pub fn sweep_beam(cfg: &RunConfig) -> Result<()> {
    let exec = Execution::default();
    let (ck, model) = load_model(cfg)?;
    let records = read_corpus(corpus_path(cfg)?)?;
    let examples = encode_all(&records, &ck.vocab, cfg);
    let header = "K\tBLEU-1\tBLEU-2\tBLEU-3\tBLEU-4\tROUGE-L\tCIDEr";
    let mut tsv = String::from(header);
    tsv.push('\n');
    println!("{header}\tseconds");
    for &k in &cfg.sweep_beams {
        let start = Instant::now();
        let results = generate_all(&model, &examples, k, exec)?;
        let hyps = examples
            .iter()
            .zip(&results)
            .map(|(ex, r)| {
                Ok(HypothesisLine {
                    id: ex.id.clone(),
                    text: text(&r.best.tokens, &ck.vocab, ex)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let secs = start.elapsed().as_secs_f64();
        let r = score(&hyps, &records)?;
        let row = format!(
            "{k}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            100.0 * r.bleu_1,
            100.0 * r.bleu_2,
            100.0 * r.bleu_3,
            100.0 * r.bleu_4,
            100.0 * r.rouge_l,
            100.0 * r.cider
        );
        println!("{row}\t{secs:.3}");
        tsv.push_str(&row);
        tsv.push('\n');
    }
    create(&cfg.paths.out_dir.join(SWEEP_TABLE))?.write_all(tsv.as_bytes())?;
    Ok(())
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

pub fn inspect_attention(cfg: &RunConfig, id: &str) -> Result<()> {
    let (ck, model) = load_model(cfg)?;
    let candidates = [cfg.paths.test.clone(), cfg.paths.dev.clone(), Some(cfg.paths.train.clone())];
    let mut found = None;
    for p in candidates.iter().flatten().filter(|p| p.exists()) {
        if let Some(r) = read_corpus(p)?.into_iter().find(|r| r.id == id) {
            found = Some(r);
            break;
        }
    }
    let record = found.ok_or_else(|| Error::Data(format!("no record with id {id:?}")))?;
    let ex = encode_example(&record, &ck.vocab, cfg.limits());
    let ctx = model.memory_context(&ex)?;
    let best = beam_search(&model, &ctx, cfg.beam, Execution::Sequential)?.best;
    let dump = dump_attention(&model, &ck.vocab, &ex, &best)?;
    let out = cfg.paths.out_dir.join("attention").join(format!("{}.json", file_stem(id)));
    let mut w = create(&out)?;
    serde_json::to_writer_pretty(&mut w, &dump)?;
    writeln!(w)?;
    w.flush()?;
    println!(
        "wrote {} co-attention matrices and the decoder context attention to {}",
        2 * dump.turns.len(),
        out.display()
    );
    Ok(())
}
