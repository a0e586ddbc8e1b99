//! Frozen renderings and dataset validation fixtures.

mod common;

use std::fs;

use common::*;
use relgen::corpus::{EntityCategory, EntityMention, PassageRecord};
use relgen::labelset::LabelCatalog;
use relgen::prompting::{build_instruction_prompt, build_summarization_prompt, Demonstration};
use relgen::sft_export::validate_sft;

const PD_TEXT: &str = "During PD development, microbiota changes can be accompanied by reduced concentrations of branched-chain amino acids (BCAAs) and aromatic amino-acids in comparison with the healthy control group.";

fn pd_passage() -> PassageRecord {
    let start = PD_TEXT.find("branched-chain").unwrap();
    PassageRecord {
        passage_id: "pd1".into(),
        document_id: "doc1".into(),
        text: PD_TEXT.into(),
        entities: vec![
            EntityMention {
                id: "T1".into(),
                surface: "PD".into(),
                category: EntityCategory::Disease,
                start: 7,
                end: 9,
            },
            EntityMention {
                id: "T2".into(),
                surface: "branched-chain amino acids".into(),
                category: EntityCategory::Chemical,
                start,
                end: start + "branched-chain amino acids".len(),
            },
        ],
    }
}

fn demo(e1: &str, rel: &str, e2: &str) -> Demonstration {
    Demonstration {
        entity1: e1.into(),
        relation: rel.into(),
        entity2: e2.into(),
    }
}

#[test]
fn summarization_prompt_with_three_demonstrations() {
    let p = pd_passage();
    let demos = [
        demo("butyrate", "Increase", "IL-10"),
        demo("PD", "Decrease", "branched-chain amino acids"),
        demo("Akkermansia muciniphila", "Improve", "insulin resistance"),
    ];
    let prompt = build_summarization_prompt(&p, &p.entities[0], &p.entities[1], &demos).unwrap();
    let rendered: Vec<String> = demos.iter().map(Demonstration::render).collect();
    let positions: Vec<usize> = rendered.iter().map(|d| prompt.user.find(&format!("{d}\n")).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "demonstrations keep their order");
    assert_golden("summarization_three_demos.txt", &prompt.user);
}

#[test]
fn instruction_prompt_over_pd_passage() {
    let prompt = build_instruction_prompt(PD_TEXT, "PD", "branched-chain amino acids").unwrap();
    let text = format!("[system]\n{}\n[user]\n{}\n", prompt.system.unwrap(), prompt.user);
    assert_golden("instruction_pd.txt", &text);
}

#[test]
fn dataset_validation_names_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, config) = write_pipeline_fixture(dir.path());
    let c = config.to_str().unwrap();
    let out = relgen(dir.path(), &["--config", c, "ingest", corpus.to_str().unwrap(), "--out", "store"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = relgen(
        dir.path(),
        &["--config", c, "export-sft", "--store", "store", "--input-source", "passage", "--out", "sft.jsonl"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let path = dir.path().join("sft.jsonl");
    let catalog = LabelCatalog::microbiorel();
    let clean = validate_sft(&path, &catalog).unwrap();
    assert!(clean.is_clean() && clean.checksum_ok && clean.round_trip_ok);
    assert_eq!(clean.lines, 59);
    let original = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = original.lines().collect();

    // one corrupted byte on line 3
    let mut bytes = original.clone().into_bytes();
    let offset = lines[..2].iter().map(|l| l.len() + 1).sum::<usize>();
    bytes[offset] = b'#';
    fs::write(&path, &bytes).unwrap();
    let v = validate_sft(&path, &catalog).unwrap();
    assert!(!v.checksum_ok);
    assert!(v.violations.iter().any(|x| x.line == 3), "{:?}", v.violations);
    let out = relgen(dir.path(), &["validate-sft", "sft.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stdout(&out).contains("line 3:"));

    // a label outside the catalog on line 2
    let edited: String = lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let l = if i == 1 {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                l.replace(&format!("\"output\":\"{}\"", v["output"].as_str().unwrap()), "\"output\":\"Upregulates\"")
            } else {
                l.to_string()
            };
            l + "\n"
        })
        .collect();
    fs::write(&path, edited).unwrap();
    let v = validate_sft(&path, &catalog).unwrap();
    let on_line_2: Vec<_> = v.violations.iter().filter(|x| x.line == 2).collect();
    assert!(on_line_2.iter().any(|x| x.message.contains("Upregulates")), "{:?}", v.violations);
}
