//! Synthetic corpus generator.
//!
//! Produces a small topic-structured text distribution with two latent
//! binary attributes (sentiment, subjectivity), plus derived datasets:
//! an unlabeled corpus, a scored sentence-similarity set, contrastive
//! triplets, two binary classification tasks and a held-out probe pool.
//! Everything is a pure function of the seed.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;

use super::{io, CorpusError, Vocabulary};

const TOPIC_NOUNS: [[&str; 6]; 8] = [
    ["garden", "roses", "tulips", "hedge", "lawn", "petals"],
    ["kitchen", "soup", "bread", "oven", "stew", "spices"],
    ["harbor", "sailboat", "tide", "gull", "pier", "anchor"],
    ["orchestra", "violin", "melody", "chorus", "flute", "drum"],
    ["storm", "thunder", "hail", "gale", "clouds", "lightning"],
    ["desert", "dunes", "cactus", "drought", "sand", "vulture"],
    ["swamp", "mud", "leeches", "fog", "reeds", "moss"],
    ["ruins", "rubble", "cobwebs", "decay", "shards", "dust"],
];

const TOPIC_VERBS: [[&str; 4]; 8] = [
    ["blooms", "sprouts", "blossoms", "flourishes"],
    ["simmers", "bakes", "boils", "cools"],
    ["drifts", "docks", "sways", "sails"],
    ["plays", "echoes", "swells", "hums"],
    ["rumbles", "crashes", "batters", "howls"],
    ["scorches", "cracks", "parches", "shifts"],
    ["festers", "sinks", "rots", "stagnates"],
    ["crumbles", "collapses", "erodes", "fades"],
];

const POSITIVE_ADJ: [&str; 6] = ["wonderful", "lovely", "delightful", "charming", "superb", "pleasant"];
const NEGATIVE_ADJ: [&str; 6] = ["dreadful", "awful", "gloomy", "miserable", "horrid", "bleak"];

const SUBJECTIVE_OPENERS: [&str; 4] = ["i think", "we feel", "i believe", "we reckon"];
const OBJECTIVE_OPENERS: [&str; 4] =
    ["the report shows", "the survey records", "the study notes", "the record states"];

/// Topics 0..3 carry positive sentiment, 4..7 negative.
fn topic_is_positive(topic: usize) -> bool {
    topic < 4
}

/// Even topics are written subjectively, odd topics objectively.
fn topic_is_subjective(topic: usize) -> bool {
    topic.is_multiple_of(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_topics: usize,
    pub n_sentences: usize,
    pub n_sts_pairs: usize,
    pub n_triplets: usize,
    pub n_class_train: usize,
    pub n_class_test: usize,
    pub n_probes: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_topics: 8,
            n_sentences: 2400,
            n_sts_pairs: 600,
            n_triplets: 2400,
            n_class_train: 1200,
            n_class_test: 400,
            n_probes: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub sentences: Vec<String>,
    pub sentence_topics: Vec<usize>,
    pub sts: Vec<(f64, String, String)>,
    pub sts_topics: Vec<(usize, usize)>,
    pub triplets: Vec<(String, String, String)>,
    pub triplet_topics: Vec<(usize, usize)>,
    pub sentiment_train: Vec<(usize, String)>,
    pub sentiment_test: Vec<(usize, String)>,
    pub subjectivity_train: Vec<(usize, String)>,
    pub subjectivity_test: Vec<(usize, String)>,
    pub probes: Vec<String>,
}

/// Suggested target sentence for targeted attacks: grammatical, strongly
/// positive and strongly subjective, fully inside the generated
/// distribution.
pub fn default_target_sentence() -> &'static str {
    "i think the wonderful garden blooms near the roses"
}

/// Candidate target sentences with different cue profiles, from clear
/// cues on both attributes down to deliberately mixed cues.
pub fn target_candidates() -> Vec<&'static str> {
    vec![
        "i think the wonderful garden blooms near the roses",
        "i think the report shows the wonderful garden blooms near the lovely roses",
        "i think the wonderful dreadful garden blooms near the gloomy roses",
        "i think the report shows the wonderful dreadful garden storm blooms near the hail",
    ]
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn gen_sentence<R: Rng>(rng: &mut R, topic: usize) -> String {
    let nouns = &TOPIC_NOUNS[topic];
    let verbs = &TOPIC_VERBS[topic];
    let adj_pool: &[&str] =
        if topic_is_positive(topic) { &POSITIVE_ADJ } else { &NEGATIVE_ADJ };
    let openers: &[&str] =
        if topic_is_subjective(topic) { &SUBJECTIVE_OPENERS } else { &OBJECTIVE_OPENERS };

    let opener = pick(rng, openers);
    let adj = pick(rng, adj_pool);
    let n1 = pick(rng, nouns);
    let mut n2 = pick(rng, nouns);
    while n2 == n1 {
        n2 = pick(rng, nouns);
    }
    let v1 = pick(rng, verbs);
    let v2 = pick(rng, verbs);

    match rng.gen_range(0..4) {
        0 => format!("{opener} the {adj} {n1} {v1} near the {n2}"),
        1 => format!("{opener} the {adj} {n1} {v1} and the {n2} {v2}"),
        2 => format!("{opener} the {n1} {v1} by the {adj} {n2}"),
        _ => format!("{opener} the {adj} {n1} {v1} while the {n2} {v2}"),
    }
}

fn jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<&str> = a.split_whitespace().collect();
    let sb: BTreeSet<&str> = b.split_whitespace().collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    inter / union
}

fn all_bank_words() -> BTreeSet<String> {
    let mut words: BTreeSet<String> = BTreeSet::new();
    for bank in TOPIC_NOUNS.iter().chain(std::iter::once(&["the", "near", "and", "by", "while", "i"])) {
        words.extend(bank.iter().map(|w| w.to_string()));
    }
    for bank in TOPIC_VERBS.iter() {
        words.extend(bank.iter().map(|w| w.to_string()));
    }
    words.extend(POSITIVE_ADJ.iter().map(|w| w.to_string()));
    words.extend(NEGATIVE_ADJ.iter().map(|w| w.to_string()));
    for opener in SUBJECTIVE_OPENERS.iter().chain(OBJECTIVE_OPENERS.iter()) {
        words.extend(opener.split_whitespace().map(|w| w.to_string()));
    }
    words
}

/// Generates the full synthetic dataset family for one seed.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig) -> Result<SyntheticData, CorpusError> {
    if cfg.n_topics < 2 || cfg.n_topics > TOPIC_NOUNS.len() {
        return Err(CorpusError::TooFewTopics(cfg.n_topics));
    }
    let k = cfg.n_topics;

    let mut rng = rng_for(cfg.seed, "corpus.sentences");
    let mut sentences = Vec::with_capacity(cfg.n_sentences);
    let mut sentence_topics = Vec::with_capacity(cfg.n_sentences);
    for _ in 0..cfg.n_sentences {
        let t = rng.gen_range(0..k);
        sentences.push(gen_sentence(&mut rng, t));
        sentence_topics.push(t);
    }

    let mut rng = rng_for(cfg.seed, "corpus.sts");
    let mut sts = Vec::with_capacity(cfg.n_sts_pairs);
    let mut sts_topics = Vec::with_capacity(cfg.n_sts_pairs);
    for _ in 0..cfg.n_sts_pairs {
        if rng.gen_bool(0.45) {
            let t = rng.gen_range(0..k);
            let s1 = gen_sentence(&mut rng, t);
            let s2 = if rng.gen_bool(0.3) { s1.clone() } else { gen_sentence(&mut rng, t) };
            let score = 2.5 + 2.5 * jaccard(&s1, &s2);
            sts.push((score, s1, s2));
            sts_topics.push((t, t));
        } else {
            let t1 = rng.gen_range(0..k);
            let mut t2 = rng.gen_range(0..k);
            while t2 == t1 {
                t2 = rng.gen_range(0..k);
            }
            let s1 = gen_sentence(&mut rng, t1);
            let s2 = gen_sentence(&mut rng, t2);
            let score = 2.0 * jaccard(&s1, &s2);
            sts.push((score, s1, s2));
            sts_topics.push((t1, t2));
        }
    }

    let mut rng = rng_for(cfg.seed, "corpus.triplets");
    let mut triplets = Vec::with_capacity(cfg.n_triplets);
    let mut triplet_topics = Vec::with_capacity(cfg.n_triplets);
    for _ in 0..cfg.n_triplets {
        let t = rng.gen_range(0..k);
        let mut tn = rng.gen_range(0..k);
        while tn == t {
            tn = rng.gen_range(0..k);
        }
        let anchor = gen_sentence(&mut rng, t);
        let positive = gen_sentence(&mut rng, t);
        let negative = gen_sentence(&mut rng, tn);
        triplets.push((anchor, positive, negative));
        triplet_topics.push((t, tn));
    }

    let gen_classification = |stream: &str, n: usize, label_of: &dyn Fn(usize) -> usize| {
        let mut rng = rng_for(cfg.seed, stream);
        (0..n)
            .map(|_| {
                let t = rng.gen_range(0..k);
                (label_of(t), gen_sentence(&mut rng, t))
            })
            .collect::<Vec<_>>()
    };
    let sentiment_label = |t: usize| usize::from(topic_is_positive(t));
    let subjectivity_label = |t: usize| usize::from(topic_is_subjective(t));
    let sentiment_train = gen_classification("corpus.cls-sentiment-train", cfg.n_class_train, &sentiment_label);
    let sentiment_test = gen_classification("corpus.cls-sentiment-test", cfg.n_class_test, &sentiment_label);
    let subjectivity_train =
        gen_classification("corpus.cls-subjectivity-train", cfg.n_class_train, &subjectivity_label);
    let subjectivity_test =
        gen_classification("corpus.cls-subjectivity-test", cfg.n_class_test, &subjectivity_label);

    let mut rng = rng_for(cfg.seed, "corpus.probes");
    let probes: Vec<String> = (0..cfg.n_probes)
        .map(|_| {
            let t = rng.gen_range(0..k);
            gen_sentence(&mut rng, t)
        })
        .collect();

    let mut data = SyntheticData {
        sentences,
        sentence_topics,
        sts,
        sts_topics,
        triplets,
        triplet_topics,
        sentiment_train,
        sentiment_test,
        subjectivity_train,
        subjectivity_test,
        probes,
    };

    // Guarantee the unlabeled corpus covers every word that can appear in
    // any emitted file, so a vocabulary built from corpus.txt alone has no
    // out-of-vocabulary words anywhere downstream.
    let covered: BTreeSet<String> = data
        .sentences
        .iter()
        .flat_map(|s| s.split_whitespace().map(|w| w.to_string()))
        .collect();
    let missing: Vec<String> =
        all_bank_words().into_iter().filter(|w| !covered.contains(w)).collect();
    for chunk in missing.chunks(8) {
        data.sentences.push(chunk.join(" "));
        data.sentence_topics.push(0);
    }

    Ok(data)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    seed: u64,
    n_topics: usize,
    target_sentence: &'a str,
    files: Vec<&'a str>,
}

impl SyntheticData {
    /// Writes all dataset files plus `vocab.txt` and `manifest.json` into
    /// `dir`. Returns the vocabulary built from the unlabeled corpus.
    pub fn write_all(
        &self,
        dir: &Path,
        cfg: &GeneratorConfig,
        trigger_tokens: &[String],
    ) -> Result<Vocabulary, CorpusError> {
        std::fs::create_dir_all(dir)?;
        io::write_unlabeled(&dir.join("corpus.txt"), &self.sentences)?;
        io::write_sts(&dir.join("sts.tsv"), &self.sts)?;
        io::write_triplets(&dir.join("nli.tsv"), &self.triplets)?;
        io::write_classification(&dir.join("cls_sentiment_train.tsv"), 2, &self.sentiment_train)?;
        io::write_classification(&dir.join("cls_sentiment_test.tsv"), 2, &self.sentiment_test)?;
        io::write_classification(&dir.join("cls_subjectivity_train.tsv"), 2, &self.subjectivity_train)?;
        io::write_classification(&dir.join("cls_subjectivity_test.tsv"), 2, &self.subjectivity_test)?;
        io::write_unlabeled(&dir.join("probes.txt"), &self.probes)?;

        let vocab = Vocabulary::build(&self.sentences, trigger_tokens)?;
        vocab.write_file(&dir.join("vocab.txt"))?;

        let manifest = Manifest {
            seed: cfg.seed,
            n_topics: cfg.n_topics,
            target_sentence: default_target_sentence(),
            files: vec![
                "corpus.txt",
                "sts.tsv",
                "nli.tsv",
                "cls_sentiment_train.tsv",
                "cls_sentiment_test.tsv",
                "cls_subjectivity_train.tsv",
                "cls_subjectivity_test.tsv",
                "probes.txt",
                "vocab.txt",
            ],
        };
        let mut json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        json.push('\n');
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(vocab)
    }
}
