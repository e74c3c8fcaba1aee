//! Seeded synthetic data standing in for the unavailable tweet corpus: a
//! 946/122 corpus with a tunable lexical signal, a rules corpus with
//! negatives written by someone other than the mother, word vectors, a
//! lexicon, the three override rules, and a simulated chat model used to
//! record the shipped replay transcript.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{is_editable, parse_embeddings, parse_lexicon, AugmentResources, Lexicon};
use crate::corpus::{write_corpus_to, Corpus, CorpusFormat, Label, LabeledExample};
use crate::llm_augment::{
    generate_many, ChatClient, GenerationRequest, LlmConfig, LlmError, Message, PatternId, PromptPattern, Recorder,
    Transcript, Transport,
};
use crate::rules::{RuleAction, RuleSpec};
use crate::seed;
use crate::textproc::{normalize, tokenize};

pub const FIXED_TIMESTAMP: &str = "2024-01-01T00:00:00Z";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusShape {
    pub positives: usize,
    pub negatives: usize,
    /// Probability that a tweet's event phrase is drawn from its own class
    /// rather than from the shared, uninformative pool.
    pub signal: f64,
    pub seed: u64,
}

impl Default for CorpusShape {
    fn default() -> Self {
        CorpusShape { positives: 946, negatives: 122, signal: 0.7, seed: 42 }
    }
}

const POS_OPENERS: &[&str] = &[
    "", "", "finally!", "so happy", "best day ever,", "cannot believe it,", "after 14 hours of labor", "update:",
    "well", "omg", "thankful today,",
];
const NEG_OPENERS: &[&str] = &[
    "", "", "i can't stop crying,", "hardest day of my life,", "update:", "well", "i don't know how to say this,",
    "please pray,", "no words today,",
];
const POS_EVENTS: &[&str] = &[
    "our baby girl arrived",
    "my son was born",
    "we welcomed our daughter",
    "i gave birth to a healthy baby boy",
    "my little one is finally here",
    "i delivered a beautiful healthy girl",
    "she made it to full term",
    "baby was born at {ww} weeks",
    "our rainbow baby came home",
    "he is here and healthy",
    "my water broke and now our boy is here",
    "i am a mom now, she was born",
];
const NEG_EVENTS: &[&str] = &[
    "we lost our baby",
    "i had a miscarriage",
    "our son was stillborn",
    "she was born too early at {ew} weeks",
    "she didn't make it",
    "we lost the pregnancy",
    "our baby passed away in the nicu",
    "my water broke at {ew} weeks and we lost him",
    "the ectopic pregnancy ended",
    "there was no heartbeat at the scan",
    "our angel was born sleeping",
];
const SHARED_EVENTS: &[&str] = &[
    "the hospital was so busy",
    "the doctor came in again",
    "thinking about the baby",
    "so tired after last night",
    "at the hospital with my baby",
    "long night for all of us",
    "pregnancy is hard",
    "we went in for the scan",
];
const POS_DETAILS: &[&str] = &[
    "{lb}lbs {oz}oz",
    "at {ww} weeks",
    "mom and baby doing great",
    "perfect little fingers",
    "healthy and strong",
    "home from the hospital",
    "she has my eyes",
    "love him already",
    "",
];
const NEG_DETAILS: &[&str] = &[
    "at {ew} weeks",
    "heartbroken",
    "still in the nicu",
    "the doctor said nothing could be done",
    "forever in our hearts",
    "my angel baby",
    "i feel so empty",
    "",
];
const POS_TAGS: &[&str] = &["#blessed", "#BabyGirl", "#NewMom", "#ItsABoy", "#RainbowBaby", "", "", ""];
const NEG_TAGS: &[&str] = &["#AngelBaby", "#MiscarriageAwareness", "#NICU", "#PregnancyLoss", "", "", ""];
const HANDLES: &[&str] = &["jess_m", "ObGynDaily", "mama2be", "sarahk", "BabyCenter", "tmiller"];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty list")
}

fn fill_numbers(rng: &mut ChaCha8Rng, s: &str) -> String {
    s.replace("{ww}", &rng.random_range(37..=41).to_string())
        .replace("{ew}", &rng.random_range(8..=26).to_string())
        .replace("{lb}", &rng.random_range(5..=9).to_string())
        .replace("{oz}", &rng.random_range(0..=15).to_string())
}

fn join(parts: &[&str]) -> String {
    parts.iter().filter(|p| !p.is_empty()).copied().collect::<Vec<_>>().join(" ")
}

fn decorate(rng: &mut ChaCha8Rng, text: String) -> String {
    let mut text = text;
    if rng.random_bool(0.15) {
        text = format!("@{} {text}", pick(rng, HANDLES));
    }
    if rng.random_bool(0.2) {
        let code: String = (0..6).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        text = format!("{text} https://t.co/{code}");
    }
    text
}

fn tweet(rng: &mut ChaCha8Rng, label: Label, signal: f64) -> String {
    let on_signal = rng.random_bool(signal);
    let (openers, events, details, tags) = match label {
        Label::Positive => (POS_OPENERS, POS_EVENTS, POS_DETAILS, POS_TAGS),
        Label::Negative => (NEG_OPENERS, NEG_EVENTS, NEG_DETAILS, NEG_TAGS),
    };
    let event = if on_signal { pick(rng, events) } else { pick(rng, SHARED_EVENTS) };
    let detail = if on_signal || rng.random_bool(0.5) { pick(rng, details) } else { "" };
    let text = join(&[pick(rng, openers), event, detail, pick(rng, tags)]);
    let text = fill_numbers(rng, &text);
    decorate(rng, text)
}

/// A corpus with the requested class sizes in a seeded interleaved order,
/// ids `tw0001`, `tw0002`, ...
pub fn synth_corpus(shape: &CorpusShape) -> Corpus {
    let mut rng = seed::derived_rng(shape.seed, "corpus");
    let mut labels: Vec<Label> =
        std::iter::repeat_n(Label::Positive, shape.positives).chain(std::iter::repeat_n(Label::Negative, shape.negatives)).collect();
    labels.shuffle(&mut rng);
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| LabeledExample::original(format!("tw{:04}", i + 1), tweet(&mut rng, label, shape.signal), label))
        .collect();
    Corpus::new(examples).expect("generated corpus is valid")
}

const RULE1_NEGATIVES: &[&str] = &[
    "my goddaughter was born today, {detail}",
    "my god son arrived this morning {lb}lbs {oz}oz",
    "my brother and his wife welcomed a baby girl, {detail}",
    "so happy for my brother, his little boy is here",
    "my godchild was born healthy at {ww} weeks",
    "meet my god daughter, {detail}",
];
const RULE2_NEGATIVES: &[&str] = &[
    "so proud aunty of my beautiful nephew born today",
    "my niece arrived healthy at {ww} weeks, {detail}",
    "proud uncle! my sister had a baby boy",
    "i am an auntie again, welcome to the world little niece",
    "my nephew is here {lb}lbs {oz}oz and perfect",
    "proud aunt of a healthy baby girl today",
];
const RULE3_NEGATIVES: &[&str] = &[
    "congrats to my best friend on her healthy baby girl",
    "congratulations to the new mom, she is perfect",
    "huge congrats to sam and alex, baby boy arrived today",
    "congratulations on your little one, {detail}",
    "congrats mama, {detail}",
];

/// Evaluation corpus for the override rules: ordinary tweets plus
/// negatives written by relatives and friends using birth-announcement
/// vocabulary. No positive tweet matches any shipped rule.
pub fn rules_corpus(seed_value: u64) -> Corpus {
    let mut rng = seed::derived_rng(seed_value, "rules-corpus");
    let mut items: Vec<(String, Label)> = Vec::new();
    for _ in 0..300 {
        items.push((tweet(&mut rng, Label::Positive, 0.7), Label::Positive));
    }
    for _ in 0..40 {
        items.push((tweet(&mut rng, Label::Negative, 0.7), Label::Negative));
    }
    for templates in [RULE1_NEGATIVES, RULE2_NEGATIVES, RULE3_NEGATIVES] {
        for _ in 0..20 {
            let t = pick(&mut rng, templates);
            let detail = pick(&mut rng, &["healthy and strong", "perfect little fingers", "mom and baby doing great", "so much love"]);
            let text = fill_numbers(&mut rng, &t.replace("{detail}", detail));
            items.push((decorate(&mut rng, text), Label::Negative));
        }
    }
    items.shuffle(&mut rng);
    let examples = items
        .into_iter()
        .enumerate()
        .map(|(i, (text, label))| LabeledExample::original(format!("rc{:04}", i + 1), text, label))
        .collect();
    Corpus::new(examples).expect("generated corpus is valid")
}

/// The three shipped override rules. Each note keeps the typeset pattern it
/// was reconstructed from.
pub fn shipped_rules() -> Vec<RuleSpec> {
    vec![
        RuleSpec {
            rule_id: "rule-1".into(),
            pattern: r"^(?!.*\bour\s)(?!.*\bmy\s+(?:son|daughter)\b)(?=.*(?:\bmy\s+god\s*(?:daughter|son|child)\b|\bbrother\b)).*$".into(),
            action: RuleAction::ForceNegative,
            note: r"godchild or brother mentions without 'our' or 'my son|daughter'. Typeset source: $ \wedge(?!.*\backslash bour \backslash s)(?!.*\backslash bmy \backslash s+(?:son|daughter)\backslash b)(?=.*(?:my \backslash s+god \backslash s+(?:daughter|son|child)|brother)).*\$  $".into(),
        },
        RuleSpec {
            rule_id: "rule-2".into(),
            pattern: r"^(?!.*\b(?:i|i'm|i am|my)\s+due\b)(?=.*\b(?:(?:proud\s?)?aunt(?:y|ie)?|uncle|niece|nephew)\b)".into(),
            action: RuleAction::ForceNegative,
            note: r"aunt, uncle, niece or nephew announcements without a first-person due clause. Typeset source: $ \wedge(?!.* \backslash b(?:I|my)\backslash b\backslash s+due \backslash b.* \backslash b(?:proud\backslash s?aunt(?:y|ie)?|uncle)\backslash b)(?=.* \backslash b(?:proud \backslash s?aunt(?:y|ie)?|uncle)\backslash b|\backslash b(?:my\backslash s+)?(?:niece|nephew)\backslash b) $".into(),
        },
        RuleSpec {
            rule_id: "rule-3".into(),
            pattern: r"^(?!.*(?:\b(?:\d{2} weeks\b|due\b)))(?=.*\b(?:congrats|congratulations)\b).*$".into(),
            action: RuleAction::ForceNegative,
            note: r"congratulations without due-date or NN-weeks context. Typeset source: $ \wedge(?!.*(?:\backslash b(?:\backslash d{2} weeks\backslash b|due\backslash b)))(?=.*\backslash b(?:congrats|congratulations)\backslash b).*\$ $".into(),
        },
    ]
}

pub fn rules_json() -> String {
    format!("{}\n", serde_json::to_string_pretty(&shipped_rules()).expect("rules serialize"))
}

const CLUSTERS: &[&[&str]] = &[
    &["baby", "son", "daughter", "girl", "boy", "child", "newborn", "kid", "infant", "babe", "angel", "twins"],
    &["happy", "blessed", "thankful", "grateful", "excited", "thrilled", "glad", "joyful", "overjoyed", "proud"],
    &["perfect", "beautiful", "healthy", "strong", "lovely", "gorgeous", "sweet", "precious", "amazing", "adorable"],
    &["heartbroken", "devastated", "sad", "broken", "empty", "crushed", "grieving", "hurting", "lost", "numb"],
    &["hospital", "doctor", "nurse", "nurses", "nicu", "scan", "clinic", "midwife", "physician", "ward", "ultrasound"],
    &["born", "arrived", "delivered", "welcomed", "came", "birth", "labor", "labour", "delivery", "induced"],
    &["today", "tonight", "morning", "yesterday", "night", "day", "finally", "now", "again", "soon"],
    &["little", "tiny", "small", "wee", "big", "fingers", "toes", "eyes", "feet", "hands"],
    &["pregnancy", "pregnant", "miscarriage", "stillborn", "ectopic", "heartbeat", "weeks", "term", "early", "premature"],
    &["love", "adore", "cherish", "miss", "pray", "hope", "cry", "crying", "hug", "hold"],
    &["home", "house", "world", "family", "mom", "mama", "mother", "dad", "husband", "wife"],
];

/// Word vectors: each cluster shares a random center and members sit close
/// to it, so nearest neighbours stay within a cluster.
pub fn embeddings_text(seed_value: u64, dim: usize) -> String {
    let mut rng = seed::derived_rng(seed_value, "embeddings");
    let mut out = format!("{} {dim}\n", CLUSTERS.iter().map(|c| c.len()).sum::<usize>());
    for cluster in CLUSTERS {
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for word in *cluster {
            let row: Vec<String> =
                center.iter().map(|c| format!("{:.6}", c + 0.3 * rng.random_range(-1.0..1.0))).collect();
            out.push_str(&format!("{word} {}\n", row.join(" ")));
        }
    }
    out
}

const LEXICON: &[(&str, &str, &str)] = &[
    ("happy", "glad,joyful,thrilled", "sad,unhappy"),
    ("sad", "unhappy,sorrowful", "happy,glad"),
    ("baby", "infant,newborn,babe", ""),
    ("son", "boy", "daughter"),
    ("daughter", "girl", "son"),
    ("girl", "daughter", "boy"),
    ("boy", "son", "girl"),
    ("healthy", "well,thriving", "sick,ill"),
    ("beautiful", "lovely,gorgeous", "ugly"),
    ("perfect", "flawless,ideal", "flawed"),
    ("strong", "sturdy,tough", "weak"),
    ("little", "small,tiny", "big"),
    ("hospital", "clinic,infirmary", ""),
    ("doctor", "physician,doc", ""),
    ("born", "delivered", ""),
    ("arrived", "came", "left"),
    ("lost", "lose", "found"),
    ("heartbroken", "devastated,crushed", "overjoyed"),
    ("love", "adore", "hate"),
    ("early", "premature", "late"),
    ("home", "house", ""),
    ("finally", "eventually", ""),
    ("today", "tonight", "yesterday"),
    ("tired", "exhausted,weary", "rested"),
    ("hard", "difficult,tough", "easy"),
    ("empty", "hollow", "full"),
    ("long", "lengthy", "short"),
    ("busy", "hectic", "quiet"),
    ("thankful", "grateful", "ungrateful"),
    ("mom", "mother,mama", "dad"),
    ("night", "evening", "day"),
    ("pregnancy", "gestation", ""),
    ("crying", "sobbing,weeping", "laughing"),
    ("scan", "ultrasound", ""),
    ("best", "greatest,finest", "worst"),
    ("new", "fresh", "old"),
];

pub fn lexicon_text() -> String {
    let mut out = String::from("# word\tsynonyms\tantonyms\n");
    for (w, s, a) in LEXICON {
        out.push_str(&format!("{w}\t{s}\t{a}\n"));
    }
    out
}

pub fn resources(seed_value: u64) -> AugmentResources {
    AugmentResources {
        embeddings: Some(parse_embeddings(&embeddings_text(seed_value, 16)).expect("fixture embeddings parse")),
        lexicon: Some(parse_lexicon(&lexicon_text()).expect("fixture lexicon parses")),
    }
}

/// A stand-in chat model. Each pattern keeps a characteristic share of the
/// source words and rewrites the rest, so patterns differ in fidelity the
/// way real prompting styles do. Output is a pure function of the request.
pub struct SimulatedChat {
    lexicon: Lexicon,
    fillers: Vec<String>,
}

impl SimulatedChat {
    pub fn new() -> SimulatedChat {
        SimulatedChat {
            lexicon: parse_lexicon(&lexicon_text()).expect("fixture lexicon parses"),
            fillers: CLUSTERS.iter().flat_map(|c| c.iter().map(|w| w.to_string())).collect(),
        }
    }

    /// Share of source words a paraphrase keeps under each pattern.
    pub fn retention(pattern: PatternId) -> f64 {
        match pattern {
            PatternId::ContextManager => 0.88,
            PatternId::OutputAutomator => 0.82,
            PatternId::Recipe => 0.75,
            PatternId::Persona => 0.7,
            PatternId::Constraint => 0.35,
            PatternId::MultiturnDialogue => 0.3,
            PatternId::InfiniteGeneration => 0.0,
        }
    }

    fn rewrite_word(&self, rng: &mut ChaCha8Rng, word: &str) -> Option<String> {
        if let Some(syn) = self.lexicon.synonyms(word) {
            if rng.random_bool(0.6) {
                let syn: Vec<&String> = syn.iter().collect();
                return Some(syn.choose(rng).expect("non-empty").to_string());
            }
        }
        if rng.random_bool(0.3) {
            None
        } else {
            Some(self.fillers.choose(rng).expect("non-empty").clone())
        }
    }

    fn variant(&self, rng: &mut ChaCha8Rng, pattern: PatternId, source: &str) -> String {
        if pattern == PatternId::InfiniteGeneration {
            // a fresh tweet on the topic that borrows at most one source word
            let mut text = tweet(rng, Label::Negative, 0.5);
            let words: Vec<String> = tokenize(source).into_inner().into_iter().filter(|t| is_editable(t)).collect();
            if let Some(w) = words.choose(rng) {
                if rng.random_bool(0.5) {
                    text = format!("{text} {w}");
                }
            }
            return normalize(&text);
        }
        let keep = Self::retention(pattern);
        let mut out: Vec<String> = Vec::new();
        for token in tokenize(source).into_inner() {
            if rng.random_bool(keep) {
                out.push(token);
            } else if is_editable(&token) {
                out.extend(self.rewrite_word(rng, &token));
            }
        }
        if pattern == PatternId::OutputAutomator && out.len() > 3 {
            let k = rng.random_range(1..out.len());
            out.rotate_left(k);
        }
        if out.is_empty() {
            out.push(self.fillers.choose(rng).expect("non-empty").clone());
        }
        out.join(" ")
    }
}

impl Default for SimulatedChat {
    fn default() -> Self {
        SimulatedChat::new()
    }
}

impl ChatClient for SimulatedChat {
    fn complete(&self, request: &GenerationRequest, _messages: &[Message]) -> Result<String, LlmError> {
        let fp = request.fingerprint()?;
        let mut rng = seed::derived_rng(0, &fp);
        let pattern = request.pattern.pattern_id;
        let mut out = String::new();
        if matches!(pattern, PatternId::Persona | PatternId::Recipe) {
            out.push_str(&format!("Sure! Here are {} versions:\n\n", request.n_variants));
        }
        for i in 1..=request.n_variants {
            let v = self.variant(&mut rng, pattern, &request.source.text);
            if pattern == PatternId::Constraint {
                out.push_str(&format!("{i}. \"{v}\"\n"));
            } else {
                out.push_str(&format!("{i}. {v}\n"));
            }
        }
        Ok(out)
    }
}

/// Records simulated responses for every `label` example of `corpus` under
/// every pattern. Sources are normalized first, as the pipeline does.
pub fn replay_transcript(
    corpus: &Corpus,
    label: Label,
    patterns: &BTreeMap<PatternId, PromptPattern>,
    config: &LlmConfig,
) -> Result<Transcript, LlmError> {
    let chat = SimulatedChat::new();
    let recorder = Recorder::in_memory().with_clock(|| FIXED_TIMESTAMP.to_string());
    let requests: Vec<GenerationRequest> = corpus
        .examples()
        .iter()
        .filter(|e| e.label == label)
        .flat_map(|e| {
            let source = LabeledExample { text: normalize(&e.text), ..e.clone() };
            patterns.values().map(move |p| config.request(p, &source)).collect::<Vec<_>>()
        })
        .collect();
    for r in generate_many(&requests, &Transport::Live { client: &chat, recorder: &recorder }, config.max_concurrency) {
        r?;
    }
    Ok(recorder.transcript())
}

/// File names of a generated fixture set, relative to its directory.
pub const CORPUS_FILE: &str = "corpus.csv";
pub const RULES_CORPUS_FILE: &str = "rules_corpus.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const RULES_FILE: &str = "rules.json";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const PROMPTS_DIR: &str = "prompts";

fn corpus_csv(corpus: &Corpus) -> Vec<u8> {
    let mut buf = Vec::new();
    write_corpus_to(corpus, &mut buf, CorpusFormat::Csv).expect("write to memory");
    buf
}

/// Writes the full fixture set into `dir` and returns the paths written.
pub fn write_fixture_set(dir: &Path, seed_value: u64) -> Result<Vec<PathBuf>, crate::Error> {
    let io = |path: &Path, e: std::io::Error| crate::corpus::CorpusError::Io { path: path.display().to_string(), source: e };
    let prompts_dir = dir.join(PROMPTS_DIR);
    fs::create_dir_all(&prompts_dir).map_err(|e| io(&prompts_dir, e))?;

    let corpus = synth_corpus(&CorpusShape { seed: seed_value, ..CorpusShape::default() });
    let patterns: BTreeMap<PatternId, PromptPattern> =
        PatternId::ALL.iter().map(|&p| (p, PromptPattern::builtin(p))).collect();
    let transcript = replay_transcript(&corpus, Label::Negative, &patterns, &LlmConfig::default())?;

    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        (dir.join(CORPUS_FILE), corpus_csv(&corpus)),
        (dir.join(RULES_CORPUS_FILE), corpus_csv(&rules_corpus(seed_value))),
        (dir.join(EMBEDDINGS_FILE), embeddings_text(seed_value, 16).into_bytes()),
        (dir.join(LEXICON_FILE), lexicon_text().into_bytes()),
        (dir.join(RULES_FILE), rules_json().into_bytes()),
        (dir.join(TRANSCRIPT_FILE), transcript.to_jsonl().into_bytes()),
    ];
    for (id, p) in &patterns {
        files.push((prompts_dir.join(format!("{}.txt", id.id())), p.to_source().into_bytes()));
    }
    for (path, bytes) in &files {
        fs::write(path, bytes).map_err(|e| io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::RuleSet;

    #[test]
    fn corpus_has_the_reference_shape() {
        let c = synth_corpus(&CorpusShape::default());
        assert_eq!(c.class_count(Label::Positive), 946);
        assert_eq!(c.class_count(Label::Negative), 122);
        assert_eq!(c, synth_corpus(&CorpusShape::default()));
        assert!(c.examples().iter().any(|e| e.text.contains("https://t.co/")));
        assert!(c.examples().iter().any(|e| e.text.contains('@')));
        assert!(c.examples().iter().any(|e| e.text.contains('#')));
    }

    #[test]
    fn rules_fire_only_on_negatives() {
        let rs = RuleSet::new(shipped_rules()).unwrap();
        let c = rules_corpus(42);
        let mut fired = [0usize; 2];
        for e in c.examples() {
            let text = normalize(&e.text);
            if rs.apply(&text, e.label).1.is_some() {
                fired[e.label.as_u8() as usize] += 1;
            }
        }
        assert_eq!(fired[1], 0);
        assert!(fired[0] >= 60, "{fired:?}");
        let main = synth_corpus(&CorpusShape::default());
        assert!(main.examples().iter().all(|e| rs.apply(&normalize(&e.text), e.label).1.is_none()));
    }

    #[test]
    fn resources_cover_the_vocabulary() {
        let r = resources(42);
        let emb = r.embeddings.unwrap();
        assert_eq!(emb.dim(), 16);
        for w in ["baby", "hospital", "heartbroken"] {
            assert!(emb.contains(w));
        }
        assert!(r.lexicon.unwrap().synonyms("happy").is_some());
    }
}
