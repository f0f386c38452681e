//! Generated corpora and knowledge graphs for desk-scale experiments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linker::Gazetteer;
use crate::rng::Rng;
use crate::train::{corpus_jsonl, Pair};
use crate::transe::{KnowledgeGraph, Triple};

pub const PLAYS_FOR: usize = 0;
pub const BASED_IN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Copy,
    EntityLookup,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "entity_lookup" | "entity-lookup" => Ok(Task::EntityLookup),
            _ => Err(Error::config(format!("unknown task {s:?} (copy, entity_lookup)"))),
        }
    }
}

/// `n_heldout` counts validation pairs; for entity lookup each one is a
/// distinct person that never occurs in training.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub task: Task,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn copy(n_train: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            task: Task::Copy,
            n_entities: 0,
            n_relations: 0,
            n_train,
            n_heldout: 0,
            vocab_size: 20,
            seed,
        }
    }

    pub fn entity_lookup(seed: u64) -> Self {
        SyntheticTaskSpec {
            task: Task::EntityLookup,
            n_entities: 40,
            n_relations: 2,
            n_train: 64,
            n_heldout: 8,
            vocab_size: 0,
            seed,
        }
    }

    /// Lookup corpus for the entity ablation: one relation gives four persons
    /// per team, so with two pairs per training person every person name is
    /// rarer than every team name.
    pub fn lookup_ablation(seed: u64) -> Self {
        SyntheticTaskSpec {
            n_relations: 1,
            n_train: 48,
            ..Self::entity_lookup(seed)
        }
    }
}

/// Roles of the entities in the sports graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SportsGraph {
    pub kg: KnowledgeGraph,
    pub teams: Vec<usize>,
    pub cities: Vec<usize>,
    pub persons: Vec<usize>,
}

impl SportsGraph {
    /// Team entity of a person.
    pub fn team_of(&self, person: usize) -> Option<usize> {
        self.kg
            .triples
            .iter()
            .find(|t| t.h == person && t.l == PLAYS_FOR)
            .map(|t| t.t)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.kg.entity_names[&id]
    }
}

/// Teams take a fifth of the ids, then one city per team when a second
/// relation is asked for, and the rest are persons. Person `k` plays for
/// team `k mod teams`; team `j` is based in city `j`.
pub fn sports_graph(n_entities: usize, n_relations: usize) -> Result<SportsGraph> {
    if !(1..=2).contains(&n_relations) {
        return Err(Error::config("the sports graph has one or two relations"));
    }
    let n_teams = n_entities / 5;
    let n_cities = if n_relations == 2 { n_teams } else { 0 };
    if n_teams == 0 || n_entities < 2 * n_teams + n_cities {
        return Err(Error::config(format!(
            "{n_entities} entities cannot hold teams and at least as many persons"
        )));
    }
    let teams: Vec<usize> = (0..n_teams).collect();
    let cities: Vec<usize> = (n_teams..n_teams + n_cities).collect();
    let persons: Vec<usize> = (n_teams + n_cities..n_entities).collect();
    let mut names = BTreeMap::new();
    let mut triples = Vec::new();
    for (j, &t) in teams.iter().enumerate() {
        names.insert(t, format!("T{j}"));
    }
    for (j, &c) in cities.iter().enumerate() {
        names.insert(c, format!("C{j}"));
        triples.push(Triple::new(teams[j], BASED_IN, c));
    }
    for (k, &p) in persons.iter().enumerate() {
        names.insert(p, format!("P{k}"));
        triples.push(Triple::new(p, PLAYS_FOR, teams[k % n_teams]));
    }
    let kg = KnowledgeGraph::new(n_entities, n_relations, triples)?.with_names(names)?;
    Ok(SportsGraph {
        kg,
        teams,
        cities,
        persons,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub kg: KnowledgeGraph,
    pub gazetteer: Gazetteer,
}

impl SyntheticData {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("train.jsonl", corpus_jsonl(&self.train)),
            ("valid.jsonl", corpus_jsonl(&self.valid)),
            ("triples.tsv", self.kg.triples_tsv()),
            ("names.tsv", self.kg.names_tsv()),
            ("gazetteer.tsv", self.gazetteer.to_tsv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads the files written by [`SyntheticData::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let kg = KnowledgeGraph::load(&dir.join("triples.tsv"), Some(&dir.join("names.tsv")))?;
        let gazetteer = Gazetteer::load(&dir.join("gazetteer.tsv"))?;
        gazetteer.check_ids(kg.entity_count)?;
        Ok(SyntheticData {
            train: crate::train::load_corpus(&dir.join("train.jsonl"))?,
            valid: crate::train::load_corpus(&dir.join("valid.jsonl"))?,
            kg,
            gazetteer,
        })
    }
}

pub fn lookup_article(person: &str) -> String {
    format!("report : {person} scored today .")
}

pub fn lookup_summary(person: &str, team: &str) -> String {
    format!("{person} plays for {team} .")
}

/// Index of the team token within a lookup summary.
pub const TEAM_TOKEN_INDEX: usize = 3;

pub fn generate(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    let mut rng = Rng::new(spec.seed);
    match spec.task {
        Task::Copy => {
            if spec.vocab_size == 0 {
                return Err(Error::config("copy task needs a positive vocab_size"));
            }
            let mut pair = || {
                let len = 8 + rng.below(17);
                let words: Vec<String> = (0..len).map(|_| format!("w{}", rng.below(spec.vocab_size))).collect();
                Pair {
                    article: words.join(" "),
                    summary: words[..6].join(" "),
                }
            };
            let train = (0..spec.n_train).map(|_| pair()).collect();
            let valid = (0..spec.n_heldout).map(|_| pair()).collect();
            Ok(SyntheticData {
                train,
                valid,
                kg: KnowledgeGraph::new(0, 0, Vec::new())?,
                gazetteer: Gazetteer::new(),
            })
        }
        Task::EntityLookup => {
            let g = sports_graph(spec.n_entities, spec.n_relations)?;
            let n_teams = g.teams.len();
            let mut order = g.persons.clone();
            rng.shuffle(&mut order);
            // Spread held-out persons evenly over teams, and keep every team
            // in training.
            let mut left = vec![0usize; n_teams];
            for &p in &g.persons {
                left[(p - g.persons[0]) % n_teams] += 1;
            }
            let cap = spec.n_heldout.div_ceil(n_teams);
            let mut taken = vec![0usize; n_teams];
            let mut heldout = Vec::new();
            let mut train_persons = Vec::new();
            for p in order {
                let team = (p - g.persons[0]) % n_teams;
                if heldout.len() < spec.n_heldout && left[team] > 1 && taken[team] < cap {
                    left[team] -= 1;
                    taken[team] += 1;
                    heldout.push(p);
                } else {
                    train_persons.push(p);
                }
            }
            if heldout.len() < spec.n_heldout {
                return Err(Error::config(format!(
                    "cannot hold out {} persons and keep every team in training",
                    spec.n_heldout
                )));
            }
            let pair = |p: usize| {
                let team = g.team_of(p).expect("every person has a team");
                Pair {
                    article: lookup_article(g.name(p)),
                    summary: lookup_summary(g.name(p), g.name(team)),
                }
            };
            let train = (0..spec.n_train)
                .map(|i| pair(train_persons[i % train_persons.len()]))
                .collect();
            let valid = heldout.iter().map(|&p| pair(p)).collect();
            let gazetteer = Gazetteer::from_entries(g.kg.entity_names.iter().map(|(&id, n)| (n.as_str(), id)))?;
            Ok(SyntheticData {
                train,
                valid,
                kg: g.kg,
                gazetteer,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linker::{tokenize, LinkedDocument};

    #[test]
    fn graph_layout() {
        let g = sports_graph(40, 2).unwrap();
        assert_eq!((g.teams.len(), g.cities.len(), g.persons.len()), (8, 8, 24));
        assert_eq!(g.kg.triples.len(), 32);
        assert_eq!(g.name(g.team_of(g.persons[9]).unwrap()), "T1");
        assert!(sports_graph(40, 3).is_err());
        assert!(sports_graph(3, 1).is_err());
    }

    #[test]
    fn copy_task_shape() {
        let d = generate(&SyntheticTaskSpec::copy(32, 1)).unwrap();
        assert_eq!(d.train.len(), 32);
        for p in &d.train {
            let a = tokenize(&p.article);
            assert!((8..=24).contains(&a.len()));
            assert_eq!(tokenize(&p.summary), a[..6]);
        }
        assert_eq!(generate(&SyntheticTaskSpec::copy(32, 1)).unwrap(), d);
    }

    #[test]
    fn empty_corpus_keeps_graph() {
        let mut spec = SyntheticTaskSpec::entity_lookup(0);
        spec.n_train = 0;
        let d = generate(&spec).unwrap();
        assert!(d.train.is_empty());
        assert_eq!(d.kg.triples.len(), 32);
        assert_eq!(d.gazetteer.len(), 40);
    }

    #[test]
    fn lookup_pairs_agree_with_graph() {
        let d = generate(&SyntheticTaskSpec::entity_lookup(3)).unwrap();
        let team_of: BTreeMap<usize, usize> = d
            .kg
            .triples
            .iter()
            .filter(|t| t.l == PLAYS_FOR)
            .map(|t| (t.h, t.t))
            .collect();
        let mut train_people = std::collections::BTreeSet::new();
        for (i, p) in d.train.iter().chain(&d.valid).enumerate() {
            let doc = LinkedDocument::link(tokenize(&p.article), &d.gazetteer);
            assert_eq!(doc.spans.len(), 1);
            let person = doc.spans[0].entity_id;
            let summary = tokenize(&p.summary);
            let team = d.gazetteer.get(&summary[TEAM_TOKEN_INDEX]).unwrap();
            assert_eq!(team_of[&person], team);
            assert!(!tokenize(&p.article).contains(&summary[TEAM_TOKEN_INDEX]));
            if i < d.train.len() {
                train_people.insert(person);
            } else {
                assert!(!train_people.contains(&person));
            }
        }
        assert_eq!(d.valid.len(), 8);
    }

    #[test]
    fn files_round_trip() {
        let d = generate(&SyntheticTaskSpec::entity_lookup(4)).unwrap();
        let dir = std::env::temp_dir().join(format!("kgxl-synth-{}", std::process::id()));
        d.write(&dir).unwrap();
        assert_eq!(SyntheticData::load(&dir).unwrap(), d);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn heldout_persons_cover_every_team() {
        for spec in [SyntheticTaskSpec::entity_lookup(5), SyntheticTaskSpec::lookup_ablation(5)] {
            let d = generate(&spec).unwrap();
            let teams: std::collections::BTreeSet<String> =
                d.valid.iter().map(|p| tokenize(&p.summary)[TEAM_TOKEN_INDEX].clone()).collect();
            assert_eq!(teams.len(), 8);
        }
    }

    #[test]
    fn ablation_names_are_rarer_than_teams() {
        let d = generate(&SyntheticTaskSpec::lookup_ablation(1)).unwrap();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for p in &d.train {
            for t in tokenize(&p.article).into_iter().chain(tokenize(&p.summary)) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let max_person = counts.iter().filter(|(k, _)| k.starts_with('P')).map(|(_, &c)| c).max().unwrap();
        let min_team = counts.iter().filter(|(k, _)| k.starts_with('T')).map(|(_, &c)| c).min().unwrap();
        assert_eq!((max_person, min_team), (4, 6));
    }
}
