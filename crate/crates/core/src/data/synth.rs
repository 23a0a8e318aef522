//! Synthetic "world facts" corpus: a fixed table of people and their
//! attributes, rendered into training and held-out prose, plus cloze items
//! asking for an attribute after its usual phrasing.

use std::path::{Path, PathBuf};

use crate::eval::McItem;
use crate::tensor::Rng;

const SYL_A: [&str; 10] = ["Ta", "Mo", "Ri", "Ka", "Lu", "Se", "No", "Vi", "Da", "Pe"];
const SYL_B: [&str; 8] = ["ren", "lia", "dor", "mi", "san", "tek", "nova", "bel"];

const CITIES: [&str; 12] = ["Lisbon", "Oslo", "Cairo", "Lima", "Hanoi", "Quito", "Dakar", "Perth", "Bern", "Kyoto", "Tunis", "Riga"];
const JOBS: [&str; 12] = ["baker", "pilot", "nurse", "farmer", "tailor", "judge", "miner", "poet", "chef", "diver", "clerk", "guard"];
const PETS: [&str; 12] = ["cat", "dog", "parrot", "goat", "rabbit", "turtle", "horse", "owl", "frog", "lizard", "hamster", "duck"];
const COLORS: [&str; 12] = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white", "gray", "pink", "brown", "silver"];

/// Attribute tables, and the phrasings that end in the attribute value.
const ATTRIBUTES: [(&[&str], &[&str]); 4] = [
    (&CITIES, &["{n} lives in", "The home of {n} is in", "Everyone knows {n} lives in"]),
    (&JOBS, &["{n} works as a", "By trade, {n} is a", "Every morning {n} goes to work as a"]),
    (&PETS, &["{n} owns a pet", "At home {n} keeps a pet", "The only pet of {n} is a"]),
    (&COLORS, &["The favorite color of {n} is", "{n} always wears", "{n} painted the door"]),
];

const FILL_SUBJ: [&str; 10] = ["The old man", "A small child", "The teacher", "My neighbor", "The driver", "A stranger", "The mayor", "Her brother", "The singer", "A tourist"];
const FILL_VERB: [&str; 10] = ["walked to", "looked at", "talked about", "waited near", "painted", "cleaned", "visited", "forgot", "found", "left"];
const FILL_OBJ: [&str; 10] = ["the market", "the river", "a blue boat", "the station", "the garden", "an empty room", "the bridge", "the library", "a wooden box", "the harbor"];
const FILL_TAIL: [&str; 8] = ["in the rain", "before noon", "without a word", "with a smile", "after dinner", "at dawn", "once again", "for an hour"];

/// The fact table.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub names: Vec<String>,
    /// `facts[p][a]` indexes `ATTRIBUTES[a]`'s value table.
    pub facts: Vec<[usize; 4]>,
}

impl World {
    pub fn generate(n_people: usize, seed: u64) -> Self {
        let mut all: Vec<String> = SYL_A.iter().flat_map(|a| SYL_B.iter().map(move |b| format!("{a}{b}"))).collect();
        let mut rng = Rng::stream(seed, 1);
        rng.shuffle(&mut all);
        all.truncate(n_people.min(all.len()));
        let facts = all.iter().map(|_| std::array::from_fn(|a| rng.below(ATTRIBUTES[a].0.len()))).collect();
        World { names: all, facts }
    }

    fn value(&self, person: usize, attr: usize) -> &'static str {
        ATTRIBUTES[attr].0[self.facts[person][attr]]
    }

    fn fact_sentence(&self, person: usize, attr: usize, rng: &mut Rng) -> (String, String) {
        let templates = ATTRIBUTES[attr].1;
        let prefix = templates[rng.below(templates.len())].replace("{n}", &self.names[person]);
        (prefix, format!(" {}.", self.value(person, attr)))
    }

    fn filler(rng: &mut Rng) -> String {
        format!(
            "{} {} {} {}.",
            FILL_SUBJ[rng.below(FILL_SUBJ.len())],
            FILL_VERB[rng.below(FILL_VERB.len())],
            FILL_OBJ[rng.below(FILL_OBJ.len())],
            FILL_TAIL[rng.below(FILL_TAIL.len())]
        )
    }

    /// One paragraph about one or two people, mixing facts with filler.
    pub fn document(&self, rng: &mut Rng) -> String {
        let mut parts = Vec::new();
        for _ in 0..1 + rng.below(2) {
            let p = rng.below(self.names.len());
            parts.push(format!("This is about {}.", self.names[p]));
            for _ in 0..2 + rng.below(2) {
                if rng.bernoulli(0.35) {
                    parts.push(Self::filler(rng));
                }
                let (a, b) = self.fact_sentence(p, rng.below(4), rng);
                parts.push(a + &b);
            }
        }
        parts.join(" ")
    }

    pub fn documents(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = Rng::stream(seed, 2);
        (0..n).map(|_| self.document(&mut rng)).collect()
    }

    /// Items whose context is a short held-out preamble followed by an
    /// attribute phrasing; distractors are three other values of the same
    /// attribute, and the answer position is uniform.
    pub fn cloze_items(&self, n: usize, seed: u64) -> Vec<McItem> {
        let mut rng = Rng::stream(seed, 3);
        (0..n)
            .map(|_| {
                let p = rng.below(self.names.len());
                let attr = rng.below(4);
                let (prefix, truth) = self.fact_sentence(p, attr, &mut rng);
                let context = format!("This is about {}. {}", self.names[p], prefix);
                let table = ATTRIBUTES[attr].0;
                let mut wrong: Vec<usize> = (0..table.len()).filter(|&v| v != self.facts[p][attr]).collect();
                rng.shuffle(&mut wrong);
                let mut options: Vec<String> = wrong[..3].iter().map(|&v| format!(" {}.", table[v])).collect();
                let answer_index = rng.below(4);
                options.insert(answer_index, truth);
                McItem {
                    context,
                    options,
                    answer_index,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_people: usize,
    pub train_docs: usize,
    pub heldout_docs: usize,
    pub cloze_items: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_people: 48,
            train_docs: 2000,
            heldout_docs: 400,
            cloze_items: 200,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPaths {
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub cloze: PathBuf,
}

/// Writes `train.txt`, `heldout.txt` and `cloze.jsonl` into `dir`.
pub fn write_synthetic(dir: &Path, cfg: &SynthConfig) -> crate::Result<SynthPaths> {
    std::fs::create_dir_all(dir)?;
    let world = World::generate(cfg.n_people, cfg.seed);
    let paths = SynthPaths {
        train: dir.join("train.txt"),
        heldout: dir.join("heldout.txt"),
        cloze: dir.join("cloze.jsonl"),
    };
    let lines = |docs: Vec<String>| docs.join("\n") + "\n";
    std::fs::write(&paths.train, lines(world.documents(cfg.train_docs, cfg.seed)))?;
    std::fs::write(&paths.heldout, lines(world.documents(cfg.heldout_docs, cfg.seed ^ 0xFFFF)))?;
    crate::eval::write_items(&paths.cloze, &world.cloze_items(cfg.cloze_items, cfg.seed ^ 0xC10E))?;
    Ok(paths)
}
