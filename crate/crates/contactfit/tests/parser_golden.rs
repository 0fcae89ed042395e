mod common;

use contactfit::assets::Bundle;

#[test]
fn corpus_matches_expected_sets_byte_for_byte() {
    let bundle = Bundle::builtin().unwrap();
    let cases = common::parser_corpus(&bundle);
    assert!(cases.len() >= 25, "corpus has {} cases", cases.len());
    let mut failed = Vec::new();
    for c in &cases {
        if c.actual != c.expected {
            eprintln!("--- {}\nexpected:\n{}\nactual:\n{}", c.name, c.expected, c.actual);
            failed.push(c.name.clone());
        }
    }
    assert!(failed.is_empty(), "mismatched: {failed:?}");
}

#[test]
fn corpus_covers_both_modes() {
    let bundle = Bundle::builtin().unwrap();
    let cases = common::parser_corpus(&bundle);
    assert!(cases.iter().any(|c| c.mode == contactfit_core::Mode::OnePerson));
    assert!(cases.iter().any(|c| c.mode == contactfit_core::Mode::TwoPerson));
}
