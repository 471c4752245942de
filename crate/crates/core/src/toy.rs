//! A seeded toy world: an English-like source language, two related target
//! languages in Devanagari (about half of the "Marathi" words are shared
//! with "Hindi"), word-by-word translation and a noisy MT system. Used for
//! the shipped toy corpora, tests and benchmarks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{CipherTranslator, ExternalTranslator};
use crate::corpus::{
    build_synthetic_triplets, load_corpus_dir, load_parallel, save_corpus, save_parallel, ApeTriplet, Corpus,
    LangId, Origin, ParallelPair, Split,
};
use crate::error::{Error, Result};
use crate::metrics::ter;
use crate::qe::{word_tags, QeAnnotation};

pub const ENGLISH: &str = "eng_Latn";
pub const HINDI: &str = "hin_Deva";
pub const MARATHI: &str = "mar_Deva";
pub const WORLD_FILE: &str = "world.json";

const COMMON: &[&str] = &[
    "the", "a", "man", "woman", "child", "city", "river", "house", "road", "market", "water", "food", "book",
    "school", "day", "night", "old", "new", "big", "small", "sees", "finds", "builds", "needs", "visits", "opens",
];

const DOMAIN_WORDS: &[(&str, &[&str])] = &[
    ("news", &["minister", "election", "report", "vote", "police", "crowd"]),
    ("tourism", &["temple", "beach", "fort", "museum", "ticket", "guide"]),
    ("health", &["hospital", "fever", "medicine", "patient", "nurse", "vaccine"]),
    ("law", &["judge", "lawyer", "case", "witness", "contract", "appeal"]),
];

const CONSONANTS: &[&str] = &[
    "क", "ख", "ग", "च", "ज", "ट", "ड", "त", "द", "न", "प", "ब", "म", "य", "र", "ल", "व", "स", "ह",
];
const VOWEL_SIGNS: &[&str] = &["", "ा", "ि", "ी", "ु", "े", "ो"];

/// Per-word corruption rates of the toy MT system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub substitute: f64,
    pub drop: f64,
    pub insert: f64,
    pub swap: f64,
}

impl Noise {
    pub const SYNTHETIC: Noise = Noise {
        substitute: 0.16,
        drop: 0.06,
        insert: 0.06,
        swap: 0.05,
    };
    pub const AUTHENTIC: Noise = Noise {
        substitute: 0.14,
        drop: 0.05,
        insert: 0.05,
        swap: 0.04,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub seed: u64,
    /// Source words; the target lexicons are index-aligned with it.
    pub english: Vec<String>,
    pub hindi: Vec<String>,
    pub marathi: Vec<String>,
    pub common: Vec<usize>,
    pub domains: BTreeMap<String, Vec<usize>>,
    /// Authentic domains per target language.
    pub authentic_domains: BTreeMap<String, Vec<String>>,
}

fn lang(code: &str) -> LangId {
    LangId::new(code).expect("valid toy language code")
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", CONSONANTS.choose(rng).unwrap(), VOWEL_SIGNS.choose(rng).unwrap()))
        .collect()
}

fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl ToyWorld {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "lexicon"));
        let mut english: Vec<String> = COMMON.iter().map(|w| w.to_string()).collect();
        let common: Vec<usize> = (0..english.len()).collect();
        let mut domains = BTreeMap::new();
        for (d, words) in DOMAIN_WORDS {
            let start = english.len();
            english.extend(words.iter().map(|w| w.to_string()));
            domains.insert(d.to_string(), (start..english.len()).collect());
        }
        let mut used = BTreeSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng| loop {
            let w = pseudo_word(rng);
            if used.insert(w.clone()) {
                return w;
            }
        };
        let hindi: Vec<String> = english.iter().map(|_| fresh(&mut rng)).collect();
        let marathi: Vec<String> = hindi
            .iter()
            .map(|h| if rng.gen_bool(0.5) { h.clone() } else { fresh(&mut rng) })
            .collect();
        let authentic_domains = BTreeMap::from([
            (HINDI.to_string(), vec!["news".into(), "tourism".into(), "law".into()]),
            (MARATHI.to_string(), vec!["news".into(), "tourism".into(), "health".into()]),
        ]);
        ToyWorld {
            seed,
            english,
            hindi,
            marathi,
            common,
            domains,
            authentic_domains,
        }
    }

    pub fn targets() -> [&'static str; 2] {
        [HINDI, MARATHI]
    }

    pub fn lexicon(&self, code: &str) -> Result<&[String]> {
        match code {
            ENGLISH => Ok(&self.english),
            HINDI => Ok(&self.hindi),
            MARATHI => Ok(&self.marathi),
            other => Err(Error::Argument(format!("no toy language {other}"))),
        }
    }

    fn table(&self, from: &str, to: &str) -> Result<HashMap<String, String>> {
        let a = self.lexicon(from)?;
        let b = self.lexicon(to)?;
        let mut t = HashMap::new();
        for (x, y) in a.iter().zip(b) {
            // Shared target words map onto themselves; first entry wins.
            t.entry(x.clone()).or_insert_with(|| y.clone());
        }
        Ok(t)
    }

    /// Clean word-by-word translation between every pair of toy languages.
    pub fn translator(&self) -> CipherTranslator {
        let codes = [ENGLISH, HINDI, MARATHI];
        let mut c = CipherTranslator::new();
        for from in codes {
            for to in codes {
                if from != to {
                    c = c.with_table(lang(from), lang(to), self.table(from, to).expect("toy languages"));
                }
            }
        }
        c
    }

    pub fn mt(&self, noise: Noise, label: &str) -> ToyMt {
        ToyMt {
            clean: self.translator(),
            vocab: BTreeMap::from([
                (HINDI.to_string(), self.hindi.clone()),
                (MARATHI.to_string(), self.marathi.clone()),
            ]),
            noise,
            seed: sub_seed(self.seed, label),
        }
    }

    /// A random source sentence of 3 to 7 words; domain words appear with
    /// probability 0.4 per slot.
    pub fn sentence(&self, rng: &mut ChaCha8Rng, domain: Option<&str>) -> Vec<String> {
        let len = rng.gen_range(3..=7);
        let pool: Vec<usize> = match domain.and_then(|d| self.domains.get(d)) {
            Some(words) => words.clone(),
            None => self.domains.values().flatten().copied().collect(),
        };
        (0..len)
            .map(|_| {
                let i = if rng.gen_bool(0.4) {
                    *pool.choose(rng).unwrap()
                } else {
                    *self.common.choose(rng).unwrap()
                };
                self.english[i].clone()
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
    }
}

/// Clean translation followed by seeded per-word corruption. The noise
/// depends only on the seed and the sentence, so it is reproducible.
#[derive(Debug, Clone)]
pub struct ToyMt {
    clean: CipherTranslator,
    vocab: BTreeMap<String, Vec<String>>,
    noise: Noise,
    seed: u64,
}

impl ExternalTranslator for ToyMt {
    fn supports(&self, from: &LangId, to: &LangId) -> bool {
        self.clean.supports(from, to) && self.vocab.contains_key(to.code())
    }

    fn translate(&self, sentence: &[String], from: &LangId, to: &LangId) -> Result<Vec<String>> {
        let clean = self.clean.translate(sentence, from, to)?;
        let vocab = &self.vocab[to.code()];
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(to.code().as_bytes());
        for w in sentence {
            h.update(w.as_bytes());
            h.update([0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes")));
        let n = self.noise;
        let mut out: Vec<String> = Vec::with_capacity(clean.len() + 2);
        for w in clean {
            let r: f64 = rng.gen();
            if r < n.drop {
                continue;
            } else if r < n.drop + n.substitute {
                out.push(vocab.choose(&mut rng).unwrap().clone());
            } else {
                out.push(w);
            }
            if rng.gen_bool(n.insert) {
                out.push(vocab.choose(&mut rng).unwrap().clone());
            }
        }
        for i in 0..out.len().saturating_sub(1) {
            if rng.gen_bool(n.swap) {
                out.swap(i, i + 1);
            }
        }
        if out.is_empty() {
            out.push(vocab.choose(&mut rng).unwrap().clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySizes {
    pub parallel_train: usize,
    pub parallel_dev: usize,
    pub synthetic_train: usize,
    pub synthetic_dev: usize,
    pub authentic_train: usize,
    pub authentic_dev: usize,
    pub authentic_test: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        ToySizes {
            parallel_train: 600,
            parallel_dev: 30,
            synthetic_train: 600,
            synthetic_dev: 30,
            authentic_train: 240,
            authentic_dev: 30,
            authentic_test: 100,
        }
    }
}

/// Corpora of one English-to-target pair.
#[derive(Debug, Clone)]
pub struct ToyPair {
    pub target: LangId,
    pub parallel_train: Vec<ParallelPair>,
    pub parallel_dev: Vec<ParallelPair>,
    pub synthetic_train: Corpus,
    pub synthetic_dev: Corpus,
    pub authentic_train: Corpus,
    pub authentic_dev: Corpus,
    pub authentic_test: Corpus,
}

impl ToyPair {
    /// Short pair label such as `en-hi`.
    pub fn label(&self) -> String {
        pair_label(self.target.code())
    }
}

pub fn pair_label(target: &str) -> String {
    let lang = target.split('_').next().unwrap_or(target);
    let short = match lang {
        "hin" => "hi",
        "mar" => "mr",
        other => other,
    };
    format!("en-{short}")
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub world: ToyWorld,
    pub pairs: Vec<ToyPair>,
}

impl ToyData {
    pub fn pair(&self, label: &str) -> Result<&ToyPair> {
        self.pairs
            .iter()
            .find(|p| p.label() == label)
            .ok_or_else(|| Error::Argument(format!("no toy pair {label}")))
    }
}

fn parallel(world: &ToyWorld, rng: &mut ChaCha8Rng, target: &str, n: usize) -> Result<Vec<ParallelPair>> {
    let tr = world.translator();
    (0..n)
        .map(|_| {
            let src = world.sentence(rng, None);
            let reference = tr.translate(&src, &lang(ENGLISH), &lang(target))?;
            ParallelPair::new(src, reference, lang(ENGLISH), lang(target))
        })
        .collect()
}

fn authentic(world: &ToyWorld, rng: &mut ChaCha8Rng, target: &str, n: usize, split: Split) -> Result<Corpus> {
    let tr = world.translator();
    let mt = world.mt(Noise::AUTHENTIC, &format!("authentic/{target}"));
    let domains = &world.authentic_domains[target];
    let mut triplets = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for i in 0..n {
        let domain = &domains[i % domains.len()];
        let src = world.sentence(rng, Some(domain));
        let pe = tr.translate(&src, &lang(ENGLISH), &lang(target))?;
        let hyp = mt.translate(&src, &lang(ENGLISH), &lang(target))?;
        let (score, _) = ter(&hyp, &pe)?;
        let tags = word_tags(&hyp, &pe);
        // DA loosely tracks quality; about one score in five is missing.
        let da = (100.0 * (1.0 - score.min(1.0)) + rng.gen_range(-5.0..5.0)).clamp(0.0, 100.0);
        let da = (da * 100.0).round() / 100.0;
        annotations.push(if rng.gen_bool(0.8) {
            QeAnnotation::with_da(da, tags)
        } else {
            QeAnnotation::without_da(tags)
        });
        triplets.push(ApeTriplet::new(src, hyp, pe, lang(ENGLISH), lang(target), domain.clone(), Origin::Authentic)?);
    }
    Corpus::new(triplets).with_split(split).with_annotations(annotations)
}

/// Generates every toy corpus for both pairs.
pub fn generate(seed: u64, sizes: &ToySizes) -> Result<ToyData> {
    let world = ToyWorld::generate(seed);
    let mut pairs = Vec::new();
    for target in ToyWorld::targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, target));
        let parallel_train = parallel(&world, &mut rng, target, sizes.parallel_train)?;
        let parallel_dev = parallel(&world, &mut rng, target, sizes.parallel_dev)?;
        let synth_mt = world.mt(Noise::SYNTHETIC, &format!("synthetic/{target}"));
        let synth_src = parallel(&world, &mut rng, target, sizes.synthetic_train + sizes.synthetic_dev)?;
        let synthetic = build_synthetic_triplets(&synth_src, &synth_mt)?;
        let dev_idx: Vec<usize> = (sizes.synthetic_train..synthetic.len()).collect();
        let train_idx: Vec<usize> = (0..sizes.synthetic_train.min(synthetic.len())).collect();
        let synthetic_train = synthetic.select(&train_idx).with_split(Split::Train);
        let synthetic_dev = synthetic.select(&dev_idx).with_split(Split::Dev);
        let authentic_train = authentic(&world, &mut rng, target, sizes.authentic_train, Split::Train)?;
        let authentic_dev = authentic(&world, &mut rng, target, sizes.authentic_dev, Split::Dev)?;
        let authentic_test = authentic(&world, &mut rng, target, sizes.authentic_test, Split::Test)?;
        pairs.push(ToyPair {
            target: lang(target),
            parallel_train,
            parallel_dev,
            synthetic_train,
            synthetic_dev,
            authentic_train,
            authentic_dev,
            authentic_test,
        });
    }
    Ok(ToyData { world, pairs })
}

/// Writes `data` as `world.json` plus one directory per pair:
/// `parallel/{train,dev}.{src,ref}`, `synthetic/{train,dev}/` and
/// `authentic/{train,dev,test}/` corpus directories.
pub fn write(data: &ToyData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.world.save(dir.join(WORLD_FILE))?;
    for p in &data.pairs {
        let base = dir.join(p.label());
        for (name, pairs) in [("train", &p.parallel_train), ("dev", &p.parallel_dev)] {
            save_parallel(
                pairs,
                base.join("parallel").join(format!("{name}.src")),
                base.join("parallel").join(format!("{name}.ref")),
            )?;
        }
        save_corpus(&p.synthetic_train, base.join("synthetic/train"))?;
        save_corpus(&p.synthetic_dev, base.join("synthetic/dev"))?;
        save_corpus(&p.authentic_train, base.join("authentic/train"))?;
        save_corpus(&p.authentic_dev, base.join("authentic/dev"))?;
        save_corpus(&p.authentic_test, base.join("authentic/test"))?;
    }
    Ok(())
}

/// Loads a directory written by [`write`].
pub fn load(dir: impl AsRef<Path>) -> Result<ToyData> {
    let dir = dir.as_ref();
    let world = ToyWorld::load(dir.join(WORLD_FILE))?;
    let mut pairs = Vec::new();
    for target in ToyWorld::targets() {
        let base = dir.join(pair_label(target));
        let par = |name: &str| {
            load_parallel(
                base.join("parallel").join(format!("{name}.src")),
                base.join("parallel").join(format!("{name}.ref")),
                &lang(ENGLISH),
                &lang(target),
            )
        };
        pairs.push(ToyPair {
            target: lang(target),
            parallel_train: par("train")?,
            parallel_dev: par("dev")?,
            synthetic_train: load_corpus_dir(base.join("synthetic/train"))?,
            synthetic_dev: load_corpus_dir(base.join("synthetic/dev"))?,
            authentic_train: load_corpus_dir(base.join("authentic/train"))?,
            authentic_dev: load_corpus_dir(base.join("authentic/dev"))?,
            authentic_test: load_corpus_dir(base.join("authentic/test"))?,
        });
    }
    Ok(ToyData { world, pairs })
}
