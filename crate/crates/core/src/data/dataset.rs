//! Joins image-grounded dialogues with captions of the same images to produce
//! dialogue–description pairs, then splits them by image into train/dev/test.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::corpus::{CorpusRecord, Speaker, Utterance};
use super::tokenize::tokenize;
use crate::error::{Error, Result};

/// A dialogue attached to one image: question/answer turns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSource {
    pub image_id: u64,
    pub turns: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionSource {
    pub image_id: u64,
    pub caption: String,
}

#[derive(Deserialize)]
struct VisDialFile {
    data: VisDialData,
}

#[derive(Deserialize)]
struct VisDialData {
    questions: Vec<String>,
    answers: Vec<String>,
    dialogs: Vec<VisDialDialog>,
}

#[derive(Deserialize)]
struct VisDialDialog {
    image_id: u64,
    dialog: Vec<VisDialTurn>,
}

#[derive(Deserialize)]
struct VisDialTurn {
    question: usize,
    #[serde(default)]
    answer: Option<usize>,
}

#[derive(Deserialize)]
struct CocoFile {
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    caption: String,
}

/// Reads the visual-dialogue JSON layout: shared `questions`/`answers` string tables and
/// `dialogs` whose turns index into them.
pub fn parse_visdial(json: &str) -> Result<Vec<DialogueSource>> {
    let file: VisDialFile =
        serde_json::from_str(json).map_err(|e| Error::Data(format!("dialogue file: {e}")))?;
    let d = file.data;
    d.dialogs
        .into_iter()
        .map(|dlg| {
            let turns = dlg
                .dialog
                .iter()
                .map(|t| {
                    let q = d.questions.get(t.question).ok_or_else(|| {
                        Error::Data(format!("image {}: question index {} out of range", dlg.image_id, t.question))
                    })?;
                    let a = match t.answer {
                        Some(i) => d.answers.get(i).ok_or_else(|| {
                            Error::Data(format!("image {}: answer index {i} out of range", dlg.image_id))
                        })?,
                        None => "",
                    };
                    Ok((q.clone(), a.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DialogueSource {
                image_id: dlg.image_id,
                turns,
            })
        })
        .collect()
}

/// Reads the image-caption annotation layout (`annotations[].image_id/caption`).
pub fn parse_coco_captions(json: &str) -> Result<Vec<CaptionSource>> {
    let file: CocoFile =
        serde_json::from_str(json).map_err(|e| Error::Data(format!("caption file: {e}")))?;
    Ok(file
        .annotations
        .into_iter()
        .map(|a| CaptionSource {
            image_id: a.image_id,
            caption: a.caption.trim().to_string(),
        })
        .collect())
}

/// Scope of caption de-duplication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DedupScope {
    #[default]
    PerImage,
    Global,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub seed: u64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub max_references: usize,
    pub dedup: DedupScope,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            seed: 0,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            max_references: 5,
            dedup: DedupScope::PerImage,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitStats {
    pub name: String,
    pub samples: usize,
    pub mean_dialog_tokens: f64,
    pub mean_desc_tokens: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BuildStats {
    pub dialogues: usize,
    pub captions: usize,
    pub ambiguous_image_ids: usize,
    pub dialogues_without_captions: usize,
    pub captions_without_dialogue: usize,
    pub duplicate_captions: usize,
    pub images: usize,
    pub pairs: usize,
    pub splits: Vec<SplitStats>,
}

#[derive(Clone, Debug)]
pub struct BuiltDataset {
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    pub stats: BuildStats,
}

fn to_record(id: String, dialogue: &DialogueSource, caption: &str, references: Option<Vec<String>>) -> CorpusRecord {
    let dialogue = dialogue
        .turns
        .iter()
        .flat_map(|(q, a)| {
            [
                Utterance {
                    speaker: Speaker::A,
                    text: q.clone(),
                },
                Utterance {
                    speaker: Speaker::B,
                    text: a.clone(),
                },
            ]
        })
        .collect();
    CorpusRecord {
        id,
        dialogue,
        description: caption.to_string(),
        references,
    }
}

fn split_stats(name: &str, records: &[CorpusRecord]) -> SplitStats {
    let n = records.len();
    let (dialog, desc) = records.iter().fold((0usize, 0usize), |(d, c), r| {
        let dt: usize = r.dialogue.iter().map(|u| tokenize(&u.text).len()).sum();
        (d + dt, c + tokenize(&r.description).len())
    });
    let mean = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    SplitStats {
        name: name.to_string(),
        samples: n,
        mean_dialog_tokens: mean(dialog),
        mean_desc_tokens: mean(desc),
    }
}

/// Inner join on image id, distinct captions per image (or globally), seeded
/// 80/10/10 split by image. Test records carry up to `max_references` captions of
/// their image as references.
pub fn build_dataset(
    dialogues: &[DialogueSource],
    captions: &[CaptionSource],
    opts: &BuildOptions,
) -> Result<BuiltDataset> {
    let mut stats = BuildStats {
        dialogues: dialogues.len(),
        captions: captions.len(),
        ..Default::default()
    };

    let mut by_image: BTreeMap<u64, Vec<&DialogueSource>> = BTreeMap::new();
    for d in dialogues {
        by_image.entry(d.image_id).or_default().push(d);
    }
    let mut unique: BTreeMap<u64, &DialogueSource> = BTreeMap::new();
    for (id, ds) in by_image {
        if ds.len() == 1 {
            unique.insert(id, ds[0]);
        } else {
            stats.ambiguous_image_ids += 1;
        }
    }

    let mut caps: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    let mut seen_global: HashSet<String> = HashSet::new();
    for c in captions {
        if !unique.contains_key(&c.image_id) {
            stats.captions_without_dialogue += 1;
            continue;
        }
        let key = tokenize(&c.caption).join(" ");
        if key.is_empty() {
            stats.duplicate_captions += 1;
            continue;
        }
        let list = caps.entry(c.image_id).or_default();
        let dup = match opts.dedup {
            DedupScope::PerImage => list.iter().any(|s| tokenize(s).join(" ") == key),
            DedupScope::Global => !seen_global.insert(key),
        };
        if dup {
            stats.duplicate_captions += 1;
        } else {
            list.push(c.caption.clone());
        }
    }
    caps.retain(|_, v| !v.is_empty());
    stats.dialogues_without_captions = unique.keys().filter(|id| !caps.contains_key(id)).count();

    let mut images: Vec<u64> = caps.keys().copied().collect();
    if images.is_empty() {
        return Err(Error::Data("no dialogue matched any caption".into()));
    }
    stats.images = images.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    images.shuffle(&mut rng);
    let n = images.len() as f64;
    let n_test = (n * opts.test_fraction).round() as usize;
    let n_dev = (n * opts.dev_fraction).round() as usize;
    if n_test + n_dev > images.len() {
        return Err(Error::Config("dev and test fractions exceed the corpus".into()));
    }
    let (test_ids, rest) = images.split_at(n_test);
    let (dev_ids, train_ids) = rest.split_at(n_dev);

    let emit = |ids: &[u64], with_refs: bool| -> Vec<CorpusRecord> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        let mut out = Vec::new();
        for id in ids {
            let dlg = unique[&id];
            let list = &caps[&id];
            let refs = with_refs.then(|| list.iter().take(opts.max_references).cloned().collect());
            for (k, cap) in list.iter().enumerate() {
                out.push(to_record(format!("{id}-{k}"), dlg, cap, refs.clone()));
            }
        }
        out
    };
    let train = emit(train_ids, false);
    let dev = emit(dev_ids, false);
    let test = emit(test_ids, true);
    stats.pairs = train.len() + dev.len() + test.len();
    stats.splits = vec![
        split_stats("train", &train),
        split_stats("dev", &dev),
        split_stats("test", &test),
    ];
    Ok(BuiltDataset {
        train,
        dev,
        test,
        stats,
    })
}

/// Plain-text table: split, sample count, mean dialogue tokens, mean description tokens.
pub fn stats_table(stats: &BuildStats) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8}  {:>10}  {:>20}  {:>18}", "split", "#samples", "mean #dialog tokens", "mean #desc tokens");
    for sp in &stats.splits {
        let _ = writeln!(
            s,
            "{:<8}  {:>10}  {:>20.1}  {:>18.2}",
            sp.name, sp.samples, sp.mean_dialog_tokens, sp.mean_desc_tokens
        );
    }
    let _ = writeln!(
        s,
        "# dialogues={} captions={} images={} pairs={} duplicate_captions={} ambiguous_image_ids={} dialogues_without_captions={} captions_without_dialogue={}",
        stats.dialogues,
        stats.captions,
        stats.images,
        stats.pairs,
        stats.duplicate_captions,
        stats.ambiguous_image_ids,
        stats.dialogues_without_captions,
        stats.captions_without_dialogue
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dlg(id: u64) -> DialogueSource {
        DialogueSource {
            image_id: id,
            turns: vec![("is it sunny".into(), "yes".into())],
        }
    }

    fn cap(id: u64, c: &str) -> CaptionSource {
        CaptionSource {
            image_id: id,
            caption: c.into(),
        }
    }

    #[test]
    fn three_dialogues_two_matching_captions() {
        let ds = [dlg(1), dlg(2), dlg(3)];
        let cs = [cap(1, "a dog runs"), cap(3, "a cat sleeps"), cap(9, "orphan caption")];
        let opts = BuildOptions {
            dev_fraction: 0.0,
            test_fraction: 0.0,
            ..Default::default()
        };
        let built = build_dataset(&ds, &cs, &opts).unwrap();
        assert_eq!(built.stats.pairs, 2);
        assert_eq!(built.train.len(), 2);
        assert_eq!(built.stats.dialogues_without_captions, 1);
        assert_eq!(built.stats.captions_without_dialogue, 1);
    }

    #[test]
    fn duplicate_caption_for_one_image_emits_one_pair() {
        let ds = [dlg(1)];
        let cs = [cap(1, "A dog runs."), cap(1, "a dog runs ."), cap(1, "a dog sits")];
        let opts = BuildOptions {
            dev_fraction: 0.0,
            test_fraction: 0.0,
            ..Default::default()
        };
        let built = build_dataset(&ds, &cs, &opts).unwrap();
        assert_eq!(built.stats.pairs, 2);
        assert_eq!(built.stats.duplicate_captions, 1);
    }

    #[test]
    fn global_dedup_drops_cross_image_duplicates() {
        let ds = [dlg(1), dlg(2)];
        let cs = [cap(1, "a dog"), cap(2, "a dog"), cap(2, "a cat")];
        let opts = BuildOptions {
            dev_fraction: 0.0,
            test_fraction: 0.0,
            dedup: DedupScope::Global,
            ..Default::default()
        };
        assert_eq!(build_dataset(&ds, &cs, &opts).unwrap().stats.pairs, 2);
        let per_image = BuildOptions { dedup: DedupScope::PerImage, ..opts };
        assert_eq!(build_dataset(&ds, &cs, &per_image).unwrap().stats.pairs, 3);
    }

    #[test]
    fn ambiguous_and_empty_join() {
        let ds = [dlg(1), dlg(1)];
        let cs = [cap(1, "x y")];
        let err = build_dataset(&ds, &cs, &BuildOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn split_by_image_is_disjoint_and_complete() {
        let ds: Vec<_> = (0..20).map(dlg).collect();
        let cs: Vec<_> = (0..20)
            .flat_map(|i| (0..3).map(move |k| cap(i, &format!("caption {k} of {i}"))))
            .collect();
        let built = build_dataset(&ds, &cs, &BuildOptions::default()).unwrap();
        assert_eq!(built.train.len(), 16 * 3);
        assert_eq!(built.dev.len(), 2 * 3);
        assert_eq!(built.test.len(), 2 * 3);
        let mut ids: Vec<&str> = built
            .train
            .iter()
            .chain(&built.dev)
            .chain(&built.test)
            .map(|r| r.id.as_str())
            .collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert!(built.test.iter().all(|r| r.references.as_ref().unwrap().len() == 3));
        assert!(built.train.iter().all(|r| r.references.is_none()));
        let again = build_dataset(&ds, &cs, &BuildOptions::default()).unwrap();
        assert_eq!(again.test, built.test);
    }

    #[test]
    fn parses_source_schemas() {
        let vis = r#"{"version":"0.9","split":"train","data":{"questions":["is it red","any people"],"answers":["yes","no"],
            "dialogs":[{"image_id":5,"caption":"ignored","dialog":[{"question":0,"answer":0,"answer_options":[0,1]},{"question":1,"answer":1}]}]}}"#;
        let d = parse_visdial(vis).unwrap();
        assert_eq!(d[0].turns, vec![("is it red".into(), "yes".into()), ("any people".into(), "no".into())]);
        let coco = r#"{"images":[{"id":5}],"annotations":[{"image_id":5,"id":1,"caption":" A red bus. "}]}"#;
        assert_eq!(parse_coco_captions(coco).unwrap(), vec![cap(5, "A red bus.")]);
        assert!(parse_visdial("{}").is_err());
        let bad = vis.replace("\"question\":1", "\"question\":7");
        assert!(parse_visdial(&bad).is_err());
    }

    #[test]
    fn stats_table_has_split_columns() {
        let built = build_dataset(&[dlg(1)], &[cap(1, "a b c")], &BuildOptions::default()).unwrap();
        let table = stats_table(&built.stats);
        let header = table.lines().next().unwrap();
        for col in ["split", "#samples", "mean #dialog tokens", "mean #desc tokens"] {
            assert!(header.contains(col));
        }
        assert!(table.contains("train"));
        assert_eq!(built.stats.splits[0].mean_dialog_tokens, 4.0);
        assert_eq!(built.stats.splits[0].mean_desc_tokens, 3.0);
    }
}
