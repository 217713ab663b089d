//! Synthetic preference data over a tiny task grammar.
//!
//! Each prompt asks for a list: `count 3 7:`, `copy cat:` or `rev cat:`. The
//! preferred answer is the correct list written with `,` between items and a
//! closing `.` (`3,4,5,6,7.`). The dispreferred answer is the same list with some
//! delimiters swapped for other punctuation (style) and/or some items replaced
//! (content). The pretraining corpus uses correct lists with random punctuation,
//! so the base model has no preference between styles.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{encode, TokenSequence};
use crate::rng::{stream, StreamRng};

pub const CHOSEN_DELIMITER: char = ',';
pub const CHOSEN_TERMINATOR: char = '.';
pub const DELIMITERS: [char; 3] = [',', ';', '/'];
pub const TERMINATORS: [char; 2] = ['.', '!'];

const DIGITS: &[u8] = b"0123456789";
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Style,
    Content,
    Other,
}

impl TokenClass {
    pub fn code(self) -> char {
        match self {
            TokenClass::Style => 's',
            TokenClass::Content => 'c',
            TokenClass::Other => 'o',
        }
    }

    pub fn from_code(c: char) -> Result<Self> {
        match c {
            's' => Ok(TokenClass::Style),
            'c' => Ok(TokenClass::Content),
            'o' => Ok(TokenClass::Other),
            _ => Err(Error::Parse(format!("unknown token class code {c:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::Style => "style",
            TokenClass::Content => "content",
            TokenClass::Other => "other",
        }
    }
}

mod class_string {
    use super::TokenClass;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[TokenClass], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.iter().map(|c| c.code()).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<TokenClass>, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| TokenClass::from_code(c).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Per-character classes, serialized as strings over `s`/`c`/`o`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletLabels {
    #[serde(with = "class_string")]
    pub prompt: Vec<TokenClass>,
    #[serde(with = "class_string")]
    pub chosen: Vec<TokenClass>,
    #[serde(with = "class_string")]
    pub rejected: Vec<TokenClass>,
}

/// A position in the rejected response that differs from the chosen one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub position: usize,
    pub class: TokenClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTriplet {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub labels: TripletLabels,
    pub corrupted: Vec<Corruption>,
}

impl PreferenceTriplet {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::InvalidConfig("triplet with an empty field".into()));
        }
        if self.chosen == self.rejected {
            return Err(Error::InvalidConfig(format!(
                "chosen and rejected responses are identical for prompt {:?}",
                self.prompt
            )));
        }
        let lens = [
            (self.labels.prompt.len(), self.prompt.chars().count()),
            (self.labels.chosen.len(), self.chosen.chars().count()),
            (self.labels.rejected.len(), self.rejected.chars().count()),
        ];
        if lens.iter().any(|(a, b)| a != b) {
            return Err(Error::InvalidConfig(format!(
                "label lengths do not match text lengths for prompt {:?}",
                self.prompt
            )));
        }
        for text in [&self.prompt, &self.chosen, &self.rejected] {
            encode(text)?;
        }
        Ok(())
    }

    pub fn chosen_sequence(&self) -> Result<TokenSequence> {
        Ok(TokenSequence::from_parts(&encode(&self.prompt)?, &encode(&self.chosen)?))
    }

    pub fn rejected_sequence(&self) -> Result<TokenSequence> {
        Ok(TokenSequence::from_parts(&encode(&self.prompt)?, &encode(&self.rejected)?))
    }

    pub fn prompt_sequence(&self) -> Result<TokenSequence> {
        Ok(TokenSequence::plain(encode(&self.prompt)?))
    }

    /// Class labels of prompt followed by chosen response.
    pub fn chosen_classes(&self) -> Vec<TokenClass> {
        self.labels.prompt.iter().chain(&self.labels.chosen).copied().collect()
    }

    pub fn rejected_classes(&self) -> Vec<TokenClass> {
        self.labels.prompt.iter().chain(&self.labels.rejected).copied().collect()
    }
}

/// Generator settings. At least one rate must be positive, or the two responses
/// could never differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub n: usize,
    /// Per-delimiter probability of swapping in other punctuation.
    pub style_rate: f64,
    /// Per-item probability of replacing the item.
    pub content_rate: f64,
    /// Documents in the pretraining corpus.
    pub corpus_docs: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            style_rate: 0.5,
            content_rate: 0.1,
            corpus_docs: 4000,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("data.n must be at least 1".into()));
        }
        for (name, r) in [("style_rate", self.style_rate), ("content_rate", self.content_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("data.{name} must lie in [0, 1]")));
            }
        }
        if self.style_rate == 0.0 && self.content_rate == 0.0 {
            return Err(Error::InvalidConfig(
                "data.style_rate and data.content_rate are both 0, so chosen would equal rejected".into(),
            ));
        }
        Ok(())
    }
}

struct Task {
    prompt: String,
    prompt_labels: Vec<TokenClass>,
    items: Vec<char>,
}

fn random_word(rng: &mut StreamRng) -> String {
    let len = rng.random_range(3..=5);
    (0..len)
        .map(|_| LETTERS[rng.random_range(0..LETTERS.len())] as char)
        .collect()
}

fn random_task(rng: &mut StreamRng) -> Task {
    let (name, args, items): (&str, Vec<String>, Vec<char>) = match rng.random_range(0..3) {
        0 => {
            let len = rng.random_range(3..=6u32);
            let a = rng.random_range(0..=10 - len);
            let b = a + len - 1;
            let items = (a..=b).map(|d| char::from_digit(d, 10).expect("digit")).collect();
            ("count", vec![a.to_string(), b.to_string()], items)
        }
        1 => {
            let w = random_word(rng);
            let items = w.chars().collect();
            ("copy", vec![w], items)
        }
        _ => {
            let w = random_word(rng);
            let items = w.chars().rev().collect();
            ("rev", vec![w], items)
        }
    };
    let mut prompt = String::from(name);
    let mut prompt_labels = vec![TokenClass::Other; name.len()];
    for a in &args {
        prompt.push(' ');
        prompt_labels.push(TokenClass::Other);
        prompt.push_str(a);
        prompt_labels.extend(std::iter::repeat_n(TokenClass::Content, a.len()));
    }
    prompt.push(':');
    prompt_labels.push(TokenClass::Style);
    Task {
        prompt,
        prompt_labels,
        items,
    }
}

fn render(items: &[char], delim: char, term: char) -> (Vec<char>, Vec<TokenClass>) {
    let mut chars = Vec::with_capacity(items.len() * 2);
    let mut labels = Vec::with_capacity(items.len() * 2);
    for (i, &c) in items.iter().enumerate() {
        if i > 0 {
            chars.push(delim);
            labels.push(TokenClass::Style);
        }
        chars.push(c);
        labels.push(TokenClass::Content);
    }
    chars.push(term);
    labels.push(TokenClass::Style);
    (chars, labels)
}

fn pick_other(rng: &mut StreamRng, pool: &[char], current: char) -> char {
    let others: Vec<char> = pool.iter().copied().filter(|&c| c != current).collect();
    others[rng.random_range(0..others.len())]
}

fn corrupt_at(rng: &mut StreamRng, c: char, class: TokenClass) -> char {
    match class {
        TokenClass::Style if TERMINATORS.contains(&c) => pick_other(rng, &TERMINATORS, c),
        TokenClass::Style => pick_other(rng, &DELIMITERS, c),
        _ => {
            let pool = if c.is_ascii_digit() { DIGITS } else { LETTERS };
            let pool: Vec<char> = pool.iter().map(|&b| b as char).collect();
            pick_other(rng, &pool, c)
        }
    }
}

/// `n` triplets, deterministic in `seed`.
pub fn gen_preference_data(seed: u64, spec: &DataSpec) -> Result<Vec<PreferenceTriplet>> {
    spec.validate()?;
    let mut rng = stream(seed, "preference-data");
    let mut out = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let task = random_task(&mut rng);
        let (chosen, labels) = render(&task.items, CHOSEN_DELIMITER, CHOSEN_TERMINATOR);
        let mut rejected = chosen.clone();
        let mut corrupted = Vec::new();
        for (pos, &class) in labels.iter().enumerate() {
            let rate = match class {
                TokenClass::Style => spec.style_rate,
                _ => spec.content_rate,
            };
            if rng.random_bool(rate) {
                rejected[pos] = corrupt_at(&mut rng, chosen[pos], class);
                corrupted.push(Corruption { position: pos, class });
            }
        }
        if corrupted.is_empty() {
            let p_style = spec.style_rate / (spec.style_rate + spec.content_rate);
            let want = if rng.random_bool(p_style) {
                TokenClass::Style
            } else {
                TokenClass::Content
            };
            let sites: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == want).collect();
            let pos = sites[rng.random_range(0..sites.len())];
            rejected[pos] = corrupt_at(&mut rng, chosen[pos], want);
            corrupted.push(Corruption { position: pos, class: want });
        }
        let t = PreferenceTriplet {
            prompt: task.prompt,
            chosen: chosen.iter().collect(),
            rejected: rejected.iter().collect(),
            labels: TripletLabels {
                prompt: task.prompt_labels,
                chosen: labels.clone(),
                rejected: labels,
            },
            corrupted,
        };
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

/// Pretraining documents: correct answers with punctuation drawn uniformly.
pub fn gen_corpus(seed: u64, n_docs: usize) -> Vec<String> {
    let mut rng = stream(seed, "pretrain-corpus");
    (0..n_docs)
        .map(|_| {
            let task = random_task(&mut rng);
            let delim = DELIMITERS[rng.random_range(0..DELIMITERS.len())];
            let term = TERMINATORS[rng.random_range(0..TERMINATORS.len())];
            let (chars, _) = render(&task.items, delim, term);
            let mut doc = task.prompt;
            doc.extend(chars);
            doc
        })
        .collect()
}

pub fn encode_corpus(docs: &[String]) -> Result<Vec<Vec<usize>>> {
    docs.iter().map(|d| encode(d)).collect()
}

pub fn write_jsonl(path: &Path, triplets: &[PreferenceTriplet]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PreferenceTriplet>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: PreferenceTriplet = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        t.validate()?;
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no triplets in {}", path.display())));
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, docs: &[String]) -> Result<()> {
    let mut body = docs.join("\n");
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let docs: Vec<String> = fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if docs.is_empty() {
        return Err(Error::Empty(format!("no documents in {}", path.display())));
    }
    Ok(docs)
}

/// Leading `1 − fraction` for training, trailing `fraction` (at least one item
/// when positive) for validation.
pub fn split_validation<T>(data: &[T], fraction: f64) -> Result<(&[T], &[T])> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidConfig("validation fraction must be in [0, 1)".into()));
    }
    let n_val = if fraction > 0.0 {
        ((data.len() as f64 * fraction).round() as usize).max(1)
    } else {
        0
    };
    if n_val >= data.len() {
        return Err(Error::Empty(format!(
            "{} items cannot be split with validation fraction {fraction}",
            data.len()
        )));
    }
    Ok(data.split_at(data.len() - n_val))
}
