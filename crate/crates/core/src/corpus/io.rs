//! Line-aligned corpus files: `.src/.mt/.pe` plus optional `.da/.tags`, a
//! per-line `.meta` file and `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::qe::{QeAnnotation, Tag};

use super::{tokenize, ApeTriplet, Corpus, LangId, Manifest, Origin, ParallelPair, Split};

pub const CORPUS_STEM: &str = "corpus";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Metadata applied uniformly to every line of a raw WMT-style corpus.
#[derive(Debug, Clone)]
pub struct CorpusMeta {
    pub source_lang: LangId,
    pub target_lang: LangId,
    pub domain: String,
    pub origin: Origin,
    pub split: Split,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // `lines` drops the empty segment after a final newline.
    Ok(text.lines().map(str::to_string).collect())
}

fn tokenized_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| {
            if line.contains('\t') {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "tab character in sentence".into(),
                });
            }
            let tokens = tokenize(&line);
            if tokens.is_empty() {
                return Err(Error::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "empty line".into(),
                });
            }
            Ok(tokens)
        })
        .collect()
}

fn check_count(path: &Path, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Alignment {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Loads three line-aligned files into a corpus with uniform metadata.
pub fn load_corpus(
    source_path: impl AsRef<Path>,
    mt_path: impl AsRef<Path>,
    pe_path: impl AsRef<Path>,
    meta: &CorpusMeta,
) -> Result<Corpus> {
    let (sp, mp, pp) = (source_path.as_ref(), mt_path.as_ref(), pe_path.as_ref());
    let src = tokenized_lines(sp)?;
    let mt = tokenized_lines(mp)?;
    check_count(mp, src.len(), mt.len())?;
    let pe = tokenized_lines(pp)?;
    check_count(pp, src.len(), pe.len())?;
    let triplets = src
        .into_iter()
        .zip(mt)
        .zip(pe)
        .map(|((source, translation), post_edit)| ApeTriplet {
            source,
            translation,
            post_edit,
            source_lang: meta.source_lang.clone(),
            target_lang: meta.target_lang.clone(),
            domain: meta.domain.clone(),
            origin: meta.origin,
        })
        .collect();
    Ok(Corpus::new(triplets).with_split(meta.split))
}

fn stem_path(dir: &Path, ext: &str) -> PathBuf {
    dir.join(format!("{CORPUS_STEM}.{ext}"))
}

fn parse_meta_line(path: &Path, line_no: usize, line: &str) -> Result<(LangId, LangId, String, Origin)> {
    let record = |message: String| Error::Record {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(record(format!("expected 4 tab-separated fields, got {}", fields.len())));
    }
    Ok((
        LangId::new(fields[0]).map_err(|e| record(e.to_string()))?,
        LangId::new(fields[1]).map_err(|e| record(e.to_string()))?,
        fields[2].to_string(),
        fields[3].parse().map_err(|e: Error| record(e.to_string()))?,
    ))
}

fn parse_da_line(path: &Path, line_no: usize, line: &str) -> Result<Option<f64>> {
    let line = line.trim();
    if line == "NA" {
        return Ok(None);
    }
    line.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| Error::Record {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("expected a decimal DA score or NA, got {line:?}"),
        })
}

fn parse_tags_line(path: &Path, line_no: usize, line: &str) -> Result<Vec<Tag>> {
    line.split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Record {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("unknown tag {t:?}"),
            })
        })
        .collect()
}

/// Loads a corpus directory written by [`save_corpus`].
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )?;
    let src = tokenized_lines(&stem_path(dir, "src"))?;
    let n = src.len();
    let mt = tokenized_lines(&stem_path(dir, "mt"))?;
    check_count(&stem_path(dir, "mt"), n, mt.len())?;
    let pe = tokenized_lines(&stem_path(dir, "pe"))?;
    check_count(&stem_path(dir, "pe"), n, pe.len())?;
    let meta_path = stem_path(dir, "meta");
    let meta_lines = read_lines(&meta_path)?;
    check_count(&meta_path, n, meta_lines.len())?;

    let mut triplets = Vec::with_capacity(n);
    for (i, (((source, translation), post_edit), meta)) in
        src.into_iter().zip(mt).zip(pe).zip(&meta_lines).enumerate()
    {
        let (source_lang, target_lang, domain, origin) = parse_meta_line(&meta_path, i + 1, meta)?;
        triplets.push(ApeTriplet {
            source,
            translation,
            post_edit,
            source_lang,
            target_lang,
            domain,
            origin,
        });
    }
    let mut corpus = Corpus::new(triplets).with_split(manifest.split);
    corpus.provenance = manifest.provenance;

    let da_path = stem_path(dir, "da");
    let tags_path = stem_path(dir, "tags");
    if da_path.exists() || tags_path.exists() {
        let da: Vec<Option<f64>> = if da_path.exists() {
            let lines = read_lines(&da_path)?;
            check_count(&da_path, n, lines.len())?;
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| parse_da_line(&da_path, i + 1, l))
                .collect::<Result<_>>()?
        } else {
            vec![None; n]
        };
        let tags: Vec<Vec<Tag>> = if tags_path.exists() {
            let lines = read_lines(&tags_path)?;
            check_count(&tags_path, n, lines.len())?;
            lines
                .iter()
                .enumerate()
                .map(|(i, l)| parse_tags_line(&tags_path, i + 1, l))
                .collect::<Result<_>>()?
        } else {
            corpus
                .triplets
                .iter()
                .map(|t| crate::qe::word_tags(&t.translation, &t.post_edit))
                .collect()
        };
        let annotations = da
            .into_iter()
            .zip(tags)
            .map(|(score, tags)| match score {
                Some(s) => QeAnnotation::with_da(s, tags),
                None => QeAnnotation::without_da(tags),
            })
            .collect();
        corpus.set_annotations(Some(annotations))?;
    }
    Ok(corpus)
}

fn write_lines<I, S>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut buf = Vec::new();
    for line in lines {
        buf.extend_from_slice(line.as_ref().as_bytes());
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Writes `corpus` under `dir`; DA and tag files only when annotated.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = &corpus.triplets;
    write_lines(&stem_path(dir, "src"), t.iter().map(|t| t.source.join(" ")))?;
    write_lines(&stem_path(dir, "mt"), t.iter().map(|t| t.translation.join(" ")))?;
    write_lines(&stem_path(dir, "pe"), t.iter().map(|t| t.post_edit.join(" ")))?;
    write_lines(
        &stem_path(dir, "meta"),
        t.iter().map(|t| {
            format!(
                "{}\t{}\t{}\t{}",
                t.source_lang, t.target_lang, t.domain, t.origin
            )
        }),
    )?;
    for ext in ["da", "tags"] {
        let p = stem_path(dir, ext);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    if let Some(ann) = corpus.annotations() {
        write_lines(
            &stem_path(dir, "da"),
            ann.iter().map(|a| match a.da_score {
                Some(s) => format!("{s}"),
                None => "NA".to_string(),
            }),
        )?;
        write_lines(
            &stem_path(dir, "tags"),
            ann.iter().map(|a| {
                a.word_tags
                    .iter()
                    .map(|t| t.as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            }),
        )?;
    }
    let manifest = corpus.manifest();
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads `{stem}.src` / `{stem}.ref` parallel files.
pub fn load_parallel(
    source_path: impl AsRef<Path>,
    reference_path: impl AsRef<Path>,
    source_lang: &LangId,
    target_lang: &LangId,
) -> Result<Vec<ParallelPair>> {
    let src = tokenized_lines(source_path.as_ref())?;
    let refs = tokenized_lines(reference_path.as_ref())?;
    check_count(reference_path.as_ref(), src.len(), refs.len())?;
    Ok(src
        .into_iter()
        .zip(refs)
        .map(|(source, reference)| ParallelPair {
            source,
            reference,
            source_lang: source_lang.clone(),
            target_lang: target_lang.clone(),
        })
        .collect())
}

pub fn save_parallel(pairs: &[ParallelPair], source_path: impl AsRef<Path>, reference_path: impl AsRef<Path>) -> Result<()> {
    for p in [source_path.as_ref(), reference_path.as_ref()] {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_lines(source_path.as_ref(), pairs.iter().map(|p| p.source.join(" ")))?;
    write_lines(reference_path.as_ref(), pairs.iter().map(|p| p.reference.join(" ")))
}
