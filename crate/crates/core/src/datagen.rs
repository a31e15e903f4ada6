//! Synthetic multi-question reading-comprehension corpus.
//!
//! Every context is a short list of facts of the form
//! `subject relation adjective noun .`; each question names a subject and a
//! relation (`subject relation ?`) and is answered by the two-word object span
//! of the matching fact. Subjects, adjectives and nouns are drawn without
//! replacement inside a context, so every answer is recoverable from the
//! context alone.
//!
//! The same `QAGroup` shape is produced from SQuAD v1.1 JSON by
//! [`ingest_squad`], and persisted in a line-delimited native format by
//! [`write_corpus`] / [`read_corpus`].

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::toylm::{LMExample, TokenSeq};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const FACT_END: &str = ".";
pub const QUESTION_MARK: &str = "?";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub context: String,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QAGroup {
    pub group_id: String,
    pub context: String,
    pub examples: Vec<QAExample>,
}

impl QAGroup {
    /// Steering needs at least one other question on the same context.
    pub fn steer_eligible(&self) -> bool {
        self.examples.len() >= 2
    }
}

/// Word pools for the fact grammar.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub subjects: Vec<String>,
    pub relations: Vec<String>,
    pub adjectives: Vec<String>,
    pub nouns: Vec<String>,
}

fn words(list: &str) -> Vec<String> {
    list.split_whitespace().map(str::to_owned).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            subjects: words(
                "alice bob carol dave erin frank grace heidi ivan judy kevin laura \
                 mallory nina oscar peggy quinn rupert sybil trent ursula victor walter \
                 xena yusuf zoe arthur bella cyrus delia edgar fiona gavin hazel igor \
                 jasper kira leon mona",
            ),
            relations: words("owns likes wants sells paints hides finds keeps"),
            adjectives: words(
                "red blue green yellow black white purple orange pink brown grey golden \
                 silver tiny huge old new shiny dusty soft heavy light round square \
                 striped wooden plastic velvet rusty bright",
            ),
            nouns: words(
                "car hat book lamp chair cup ship kite drum coat ring vase clock boot \
                 bag pen mug fork bell rope sock tent sled harp flute bowl desk fan \
                 key map box net quilt rug scarf sofa tray urn wagon yoyo",
            ),
        }
    }
}

/// Whitespace word-id map covering the special tokens and a [`Lexicon`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn from_lexicon(lex: &Lexicon) -> Result<Self> {
        let mut words: Vec<String> = [BOS, EOS, FACT_END, QUESTION_MARK].map(str::to_owned).to_vec();
        for pool in [&lex.subjects, &lex.relations, &lex.adjectives, &lex.nouns] {
            words.extend(pool.iter().cloned());
        }
        Self::from_words(words)
    }

    /// Special tokens, then every word in the corpus in sorted order.
    pub fn from_groups(groups: &[QAGroup]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for g in groups {
            seen.extend(g.context.split_whitespace());
            for e in &g.examples {
                seen.extend(e.question.split_whitespace());
                seen.extend(e.answer.split_whitespace());
            }
        }
        let specials = [BOS, EOS, FACT_END, QUESTION_MARK];
        let mut words: Vec<String> = specials.map(str::to_owned).to_vec();
        words.extend(seen.into_iter().filter(|w| !specials.contains(w)).map(str::to_owned));
        Self::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_owned()))
    }

    pub fn bos(&self) -> u32 {
        self.index[BOS]
    }

    pub fn eos(&self) -> u32 {
        self.index[EOS]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Space-joined words; ids outside the vocabulary render as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Prompt `<bos> context question` and gold continuation `answer <eos>`.
    pub fn encode_example(&self, ex: &QAExample) -> Result<(TokenSeq, Vec<u32>)> {
        let mut ids = vec![self.bos()];
        ids.extend(self.encode(&ex.context)?);
        ids.extend(self.encode(&ex.question)?);
        let mut answer = self.encode(&ex.answer)?;
        answer.push(self.eos());
        Ok((TokenSeq::prompt(ids), answer))
    }

    /// One training sequence per group: the context once, then every
    /// question followed by its answer and end token.
    pub fn encode_group(&self, group: &QAGroup) -> Result<LMExample> {
        let mut prefix = vec![self.bos()];
        prefix.extend(self.encode(&group.context)?);
        let mut turns = Vec::with_capacity(group.examples.len());
        for ex in &group.examples {
            let mut answer = self.encode(&ex.answer)?;
            answer.push(self.eos());
            turns.push((self.encode(&ex.question)?, answer));
        }
        let borrowed: Vec<(&[u32], &[u32])> = turns.iter().map(|(q, a)| (q.as_slice(), a.as_slice())).collect();
        Ok(LMExample::packed(&prefix, &borrowed))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusConfig {
    pub n_groups: usize,
    pub questions_per_group: usize,
    pub facts_per_context: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_groups: 2000,
            questions_per_group: 5,
            facts_per_context: 5,
            seed: 42,
        }
    }
}

pub fn generate_corpus(cfg: &CorpusConfig, lex: &Lexicon) -> Result<Vec<QAGroup>> {
    let f = cfg.facts_per_context;
    if f == 0 || cfg.questions_per_group == 0 {
        return Err(Error::Input("facts and questions per context must be positive".into()));
    }
    if cfg.questions_per_group > f {
        return Err(Error::Input(format!(
            "{} questions cannot query {} facts without repetition",
            cfg.questions_per_group, f
        )));
    }
    let smallest = lex.subjects.len().min(lex.adjectives.len()).min(lex.nouns.len());
    if smallest < f || lex.relations.is_empty() {
        return Err(Error::Input(format!(
            "lexicon too small for {f} facts per context (smallest pool has {smallest} words)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut groups = Vec::with_capacity(cfg.n_groups);
    for g in 0..cfg.n_groups {
        let subjects: Vec<&String> = lex.subjects.choose_multiple(&mut rng, f).collect();
        let adjectives: Vec<&String> = lex.adjectives.choose_multiple(&mut rng, f).collect();
        let nouns: Vec<&String> = lex.nouns.choose_multiple(&mut rng, f).collect();
        let relations: Vec<&String> = (0..f)
            .map(|_| lex.relations.choose(&mut rng).expect("nonempty"))
            .collect();
        let context = (0..f)
            .map(|i| format!("{} {} {} {} {FACT_END}", relations[i], subjects[i], adjectives[i], nouns[i]))
            .collect::<Vec<_>>()
            .join(" ");
        let mut order: Vec<usize> = (0..f).collect();
        order.shuffle(&mut rng);
        let examples = order[..cfg.questions_per_group]
            .iter()
            .map(|&i| QAExample {
                context: context.clone(),
                question: format!("{QUESTION_MARK} {} {}", relations[i], subjects[i]),
                answer: format!("{} {}", adjectives[i], nouns[i]),
            })
            .collect();
        groups.push(QAGroup {
            group_id: format!("g{g:05}"),
            context,
            examples,
        });
    }
    Ok(groups)
}

/// Splits by whole groups: the last `valid_groups` groups form the held-out split.
pub fn split_by_group(groups: &[QAGroup], valid_groups: usize) -> (Vec<QAGroup>, Vec<QAGroup>) {
    let cut = groups.len().saturating_sub(valid_groups);
    (groups[..cut].to_vec(), groups[cut..].to_vec())
}

/// Averages in whitespace words, laid out like a dataset-statistics table.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub context_len: f64,
    pub question_len: f64,
    pub answer_len: f64,
    pub questions_per_context: f64,
    pub examples: usize,
}

impl CorpusStats {
    pub fn to_table(&self) -> String {
        format!(
            "Context Avg. Length\t{:.2}\nQuestion Avg. Length\t{:.2}\nAnswer Avg. Length\t{:.2}\n\
             Avg. Questions / Context\t{:.2}\n#Ex.\t{}\n",
            self.context_len, self.question_len, self.answer_len, self.questions_per_context, self.examples
        )
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

pub fn corpus_stats(groups: &[QAGroup]) -> Result<CorpusStats> {
    let examples: usize = groups.iter().map(|g| g.examples.len()).sum();
    if groups.is_empty() || examples == 0 {
        return Err(Error::Input("corpus statistics need at least one example".into()));
    }
    let mean = |total: usize, n: usize| total as f64 / n as f64;
    let ctx: usize = groups.iter().map(|g| word_count(&g.context)).sum();
    let q: usize = groups.iter().flat_map(|g| &g.examples).map(|e| word_count(&e.question)).sum();
    let a: usize = groups.iter().flat_map(|g| &g.examples).map(|e| word_count(&e.answer)).sum();
    Ok(CorpusStats {
        context_len: mean(ctx, groups.len()),
        question_len: mean(q, examples),
        answer_len: mean(a, examples),
        questions_per_context: mean(examples, groups.len()),
        examples,
    })
}

#[derive(Serialize, Deserialize)]
struct Record<'a> {
    group_id: std::borrow::Cow<'a, str>,
    context: std::borrow::Cow<'a, str>,
    question: std::borrow::Cow<'a, str>,
    answer: std::borrow::Cow<'a, str>,
}

/// Writes one JSON record per example, grouped in order.
pub fn write_corpus(path: &Path, groups: &[QAGroup]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for g in groups {
        for e in &g.examples {
            let rec = Record {
                group_id: g.group_id.as_str().into(),
                context: e.context.as_str().into(),
                question: e.question.as_str().into(),
                answer: e.answer.as_str().into(),
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Io(e.into()))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<QAGroup>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut groups: Vec<QAGroup> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record<'_> = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: format!("{}:{}", path.display(), lineno + 1),
            msg: e.to_string(),
        })?;
        let idx = *by_id.entry(rec.group_id.to_string()).or_insert_with(|| {
            groups.push(QAGroup {
                group_id: rec.group_id.to_string(),
                context: rec.context.to_string(),
                examples: Vec::new(),
            });
            groups.len() - 1
        });
        if groups[idx].context != rec.context {
            return Err(Error::Parse {
                path: format!("{}:{}", path.display(), lineno + 1),
                msg: format!("context differs from earlier records of group {}", rec.group_id),
            });
        }
        groups[idx].examples.push(QAExample {
            context: rec.context.into_owned(),
            question: rec.question.into_owned(),
            answer: rec.answer.into_owned(),
        });
    }
    Ok(groups)
}

fn parse_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        msg: msg.into(),
    }
}

fn field<'v>(v: &'v Value, key: &str, at: &str) -> Result<&'v Value> {
    v.get(key).ok_or_else(|| parse_err(at, format!("missing {key:?}")))
}

fn array<'v>(v: &'v Value, key: &str, at: &str) -> Result<&'v Vec<Value>> {
    field(v, key, at)?
        .as_array()
        .ok_or_else(|| parse_err(at, format!("{key:?} is not an array")))
}

fn string<'v>(v: &'v Value, key: &str, at: &str) -> Result<&'v str> {
    field(v, key, at)?
        .as_str()
        .ok_or_else(|| parse_err(at, format!("{key:?} is not a string")))
}

/// Reads the SQuAD v1.1 layout (`data → paragraphs → qas`), one group per paragraph.
///
/// Answers use the first annotated answer text. Paragraphs with a single
/// question are kept; [`QAGroup::steer_eligible`] reports them.
pub fn ingest_squad(path: &Path) -> Result<Vec<QAGroup>> {
    let text = fs::read_to_string(path)?;
    let root: Value = serde_json::from_str(&text).map_err(|e| parse_err("$", e.to_string()))?;
    parse_squad(&root)
}

pub fn parse_squad(root: &Value) -> Result<Vec<QAGroup>> {
    let mut groups = Vec::new();
    for (di, doc) in array(root, "data", "$")?.iter().enumerate() {
        let dpath = format!("data[{di}]");
        for (pi, para) in array(doc, "paragraphs", &dpath)?.iter().enumerate() {
            let ppath = format!("{dpath}.paragraphs[{pi}]");
            let context = string(para, "context", &ppath)?;
            let mut examples = Vec::new();
            for (qi, qa) in array(para, "qas", &ppath)?.iter().enumerate() {
                let qpath = format!("{ppath}.qas[{qi}]");
                let question = string(qa, "question", &qpath)?;
                let answers = array(qa, "answers", &qpath)?;
                let first = answers
                    .first()
                    .ok_or_else(|| parse_err(&qpath, "empty \"answers\""))?;
                let answer = string(first, "text", &format!("{qpath}.answers[0]"))?;
                examples.push(QAExample {
                    context: context.to_owned(),
                    question: question.to_owned(),
                    answer: answer.to_owned(),
                });
            }
            groups.push(QAGroup {
                group_id: format!("d{di}p{pi}"),
                context: context.to_owned(),
                examples,
            });
        }
    }
    Ok(groups)
}
