//! None-pair sampling checked against a from-scratch oracle.

mod common;

use common::none_oracle as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relgen::corpus::{
    generate_none_pairs, EntityCategory, EntityMention, GoldRelation, NonePolicy, PassageRecord, Provenance,
};

fn passage(id: &str, n: usize, words: usize) -> PassageRecord {
    PassageRecord {
        passage_id: id.into(),
        document_id: "d".into(),
        text: vec!["tok"; words].join(" "),
        entities: (0..n)
            .map(|i| EntityMention {
                id: format!("E{i}"),
                surface: "tok".into(),
                category: EntityCategory::Gene,
                start: 0,
                end: 3,
            })
            .collect(),
    }
}

fn annotated(pid: &str, a: usize, b: usize) -> GoldRelation {
    GoldRelation {
        passage_id: pid.into(),
        entity1_id: format!("E{a}"),
        entity2_id: format!("E{b}"),
        label: "Affects".into(),
        provenance: Provenance::Annotated,
    }
}

fn as_pairs(out: &[GoldRelation]) -> Vec<(usize, usize)> {
    out.iter()
        .map(|r| {
            (
                r.entity1_id[1..].parse().unwrap(),
                r.entity2_id[1..].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn five_entity_sample_matches_oracle() {
    let p = passage("p", 5, 20);
    let policy = NonePolicy { floor: 1, ratio: 0.15 };
    let got = as_pairs(&generate_none_pairs(&p, &[], &policy, 42, "None"));
    let want = oracle(5, 20, &[], 1, 0.15, 42);
    assert_eq!(got, want);
    assert_eq!(got, vec![(0, 1), (0, 4), (1, 3)]);
}

#[test]
fn random_passages_match_oracle() {
    let mut meta = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..200 {
        let n = meta.gen_range(2..=12);
        let tokens = meta.gen_range(0..=200);
        let mut ann = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if meta.gen_bool(0.2) {
                    ann.push(if meta.gen_bool(0.5) { (i, j) } else { (j, i) });
                }
            }
        }
        let pid = format!("p{k}");
        let p = passage(&pid, n, tokens);
        let gold: Vec<_> = ann.iter().map(|&(a, b)| annotated(&pid, a, b)).collect();
        let seed = meta.gen();
        let policy = NonePolicy::default();
        let got = as_pairs(&generate_none_pairs(&p, &gold, &policy, seed, "None"));
        assert_eq!(got, oracle(n, tokens, &ann, 1, 0.05, seed), "passage {k}");
    }
}
