//! Vocabulary, instances, JSONL I/O and the synthetic planted-rationale corpus.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::encoder::PAD;
use crate::error::{Error, Result};

pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// A class index or a score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Score(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub tokens: Vec<usize>,
    pub label: Label,
    pub gold_mask: Option<Vec<bool>>,
}

impl Instance {
    /// Number of tokens that are not padding.
    pub fn content_len(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != PAD).count()
    }
}

/// Token strings indexed by id; id 0 is padding and id 1 the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Data(format!(
                "vocab must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// `<pad>`, `<unk>`, then `w2 .. w{size-1}`.
    pub fn synthetic(size: usize) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend((2..size).map(|i| format!("w{i}")));
        Self::new(tokens).expect("well-formed synthetic vocab")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub instances: usize,
    pub tokens: usize,
    pub unknown: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<String>,
    label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<Vec<u8>>,
}

pub fn load_jsonl(path: &Path, vocab: &Vocab) -> Result<(Vec<Instance>, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.tokens.is_empty() {
            return Err(parse_err("empty token list".into()));
        }
        let gold_mask = match rec.rationale {
            Some(r) if r.len() != rec.tokens.len() => {
                return Err(parse_err(format!(
                    "rationale has {} entries for {} tokens",
                    r.len(),
                    rec.tokens.len()
                )))
            }
            Some(r) if r.iter().any(|&b| b > 1) => {
                return Err(parse_err("rationale entries must be 0 or 1".into()))
            }
            Some(r) => Some(r.into_iter().map(|b| b == 1).collect()),
            None => None,
        };
        let tokens = rec
            .tokens
            .iter()
            .map(|t| {
                vocab.id(t).unwrap_or_else(|| {
                    report.unknown += 1;
                    UNK
                })
            })
            .collect::<Vec<_>>();
        report.tokens += tokens.len();
        report.instances += 1;
        out.push(Instance {
            tokens,
            label: rec.label,
            gold_mask,
        });
    }
    Ok((out, report))
}

pub fn save_jsonl(path: &Path, instances: &[Instance], vocab: &Vocab) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let tokens = inst
            .tokens
            .iter()
            .map(|&id| {
                vocab
                    .token(id)
                    .map(str::to_string)
                    .ok_or_else(|| Error::contract(format!("token id {id} outside vocab of {}", vocab.len())))
            })
            .collect::<Result<_>>()?;
        let rec = Record {
            tokens,
            label: inst.label,
            rationale: inst
                .gold_mask
                .as_ref()
                .map(|m| m.iter().map(|&b| b as u8).collect()),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Scores are the positive fraction of the keyphrase instead of a class.
    pub regression: bool,
    /// Inclusive range of keyphrase lengths.
    pub keyphrase_len: (usize, usize),
    pub keyphrases_per_class: usize,
    /// Size of each class's keyphrase token pool.
    pub class_pool: usize,
    /// Inclusive range of sequence lengths.
    pub seq_len: (usize, usize),
    /// Zipf exponent of the filler distribution; 0 is uniform.
    pub filler_exponent: f64,
    /// Probability that a single token from another class's pool is planted
    /// away from the keyphrase.
    pub noise_rate: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            num_classes: 4,
            regression: false,
            keyphrase_len: (2, 4),
            keyphrases_per_class: 6,
            class_pool: 8,
            seq_len: (15, 30),
            filler_exponent: 0.0,
            noise_rate: 0.1,
            train: 2000,
            dev: 200,
            test: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Number of disjoint keyphrase pools: one per class, or positive and
    /// negative in regression mode.
    pub fn num_pools(&self) -> usize {
        if self.regression {
            2
        } else {
            self.num_classes
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (kmin, kmax) = self.keyphrase_len;
        let (nmin, nmax) = self.seq_len;
        let fail = |m: String| Err(Error::contract(m));
        if !self.regression && self.num_classes < 2 {
            return fail("need at least two classes".into());
        }
        if kmin == 0 || kmin > kmax {
            return fail(format!("bad keyphrase length range {kmin}..={kmax}"));
        }
        if nmin > nmax {
            return fail(format!("bad sequence length range {nmin}..={nmax}"));
        }
        if kmax > nmin {
            return fail(format!("keyphrases up to {kmax} tokens do not fit sequences of {nmin}"));
        }
        if !self.regression && kmax > self.class_pool {
            return fail(format!("class pool of {} cannot form {kmax}-token keyphrases", self.class_pool));
        }
        if self.keyphrases_per_class == 0 {
            return fail("need at least one keyphrase per class".into());
        }
        let reserved = 2 + self.num_pools() * self.class_pool;
        if reserved >= self.vocab_size {
            return fail(format!("vocab of {} leaves no filler tokens", self.vocab_size));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(self.filler_exponent >= 0.0) {
            return fail("noise rate must be in [0, 1] and the filler exponent nonnegative".into());
        }
        if self.train == 0 {
            return fail("training split is empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub vocab: Vocab,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
    /// Token pool of each class (or positive/negative in regression mode).
    pub pools: Vec<Vec<usize>>,
    /// Keyphrases with the label each one implies.
    pub keyphrases: Vec<(Vec<usize>, Label)>,
}

impl SyntheticCorpus {
    pub fn label_of_pool_token(&self, id: usize) -> Option<usize> {
        self.pools.iter().position(|p| p.contains(&id))
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pools: Vec<Vec<usize>> = (0..spec.num_pools())
        .map(|c| {
            let start = 2 + c * spec.class_pool;
            (start..start + spec.class_pool).collect()
        })
        .collect();
    let filler_start = 2 + pools.len() * spec.class_pool;
    let fillers: Vec<usize> = (filler_start..spec.vocab_size).collect();

    let keyphrases = build_keyphrases(spec, &pools, &mut rng);
    let filler_dist = Zipf::new(fillers.len() as f64, spec.filler_exponent)
        .map_err(|e| Error::contract(format!("filler distribution: {e}")))?;

    let mut seen = HashSet::new();
    let mut split = |size: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let target = out.len();
            let inst = plant(spec, &pools, &fillers, &filler_dist, &keyphrases, target, &mut rng);
            if seen.insert(inst.tokens.clone()) {
                out.push(inst);
            }
        }
        out.shuffle(&mut rng);
        out
    };
    let train = split(spec.train, 1);
    let dev = split(spec.dev, 2);
    let test = split(spec.test, 3);
    Ok(SyntheticCorpus {
        vocab: Vocab::synthetic(spec.vocab_size),
        train,
        dev,
        test,
        pools,
        keyphrases,
    })
}

fn build_keyphrases(spec: &SyntheticSpec, pools: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Label)> {
    let (kmin, kmax) = spec.keyphrase_len;
    let mut out = Vec::new();
    if spec.regression {
        let mut seen = HashSet::new();
        let total = spec.keyphrases_per_class * 2;
        while out.len() < total {
            let len = rng.random_range(kmin..=kmax);
            let phrase: Vec<usize> = (0..len)
                .map(|_| {
                    let pool = &pools[rng.random_range(0..2)];
                    *pool.choose(rng).expect("nonempty pool")
                })
                .collect();
            if !seen.insert(phrase.clone()) {
                continue;
            }
            let positive = phrase.iter().filter(|t| pools[0].contains(t)).count();
            out.push((phrase, Label::Score(positive as f64 / len as f64)));
        }
    } else {
        for (c, pool) in pools.iter().enumerate() {
            for _ in 0..spec.keyphrases_per_class {
                let len = rng.random_range(kmin..=kmax);
                let phrase = pool.choose_multiple(rng, len).copied().collect();
                out.push((phrase, Label::Class(c)));
            }
        }
    }
    out
}

fn plant(
    spec: &SyntheticSpec,
    pools: &[Vec<usize>],
    fillers: &[usize],
    filler_dist: &Zipf<f64>,
    keyphrases: &[(Vec<usize>, Label)],
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Instance {
    let (phrase, label) = if spec.regression {
        keyphrases.choose(rng).expect("nonempty keyphrase bank").clone()
    } else {
        // cycle through classes so every split is balanced
        let class = index % spec.num_classes;
        let own = &keyphrases[class * spec.keyphrases_per_class..(class + 1) * spec.keyphrases_per_class];
        own.choose(rng).expect("nonempty keyphrase bank").clone()
    };
    let n = rng.random_range(spec.seq_len.0..=spec.seq_len.1);
    let mut tokens: Vec<usize> = (0..n)
        .map(|_| fillers[filler_dist.sample(rng) as usize - 1])
        .collect();
    let start = rng.random_range(0..=n - phrase.len());
    let end = start + phrase.len();
    tokens[start..end].copy_from_slice(&phrase);
    let mut gold = vec![false; n];
    gold[start..end].fill(true);

    if rng.random::<f64>() < spec.noise_rate {
        // not adjacent to the keyphrase, so it never extends it
        let slots: Vec<usize> = (0..n).filter(|&i| i + 1 < start || i > end).collect();
        if let Some(&slot) = slots.choose(rng) {
            let own = match label {
                Label::Class(c) => c,
                Label::Score(_) => usize::MAX,
            };
            let others: Vec<usize> = (0..pools.len()).filter(|&p| p != own).collect();
            let pool = &pools[*others.choose(rng).expect("at least two pools")];
            tokens[slot] = *pool.choose(rng).expect("nonempty pool");
        }
    }
    Instance {
        tokens,
        label,
        gold_mask: Some(gold),
    }
}
