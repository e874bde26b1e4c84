use georerank::prompts::{render_pairwise, render_pointwise, ImageResolver, MessagePart, PromptTemplate};
use georerank::simbackend::synthetic_dataset;
use georerank::StrategyId;

fn fixture(strategy: StrategyId) -> String {
    let path = format!("{}/tests/fixtures/prompts/{}.txt", env!("CARGO_MANIFEST_DIR"), strategy.as_str());
    std::fs::read_to_string(path).unwrap()
}

fn images_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for l in synthetic_dataset(1, 3, 0) {
        for r in std::iter::once(&l.query.image_ref).chain(l.candidates.iter().map(|c| &c.image_ref)) {
            let p = dir.path().join(r);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            std::fs::write(p, b"img").unwrap();
        }
    }
    dir
}

#[test]
fn pointwise_prompts_match_fixtures() {
    let dir = images_dir();
    let resolver = ImageResolver::new(Some(dir.path().into()));
    let list = &synthetic_dataset(1, 3, 0)[0];
    for s in [StrategyId::Direct, StrategyId::Likert, StrategyId::Yesno, StrategyId::ReasonYesno] {
        let msg = render_pointwise(s, &list.query, &list.candidates[1], &resolver).unwrap();
        assert_eq!(msg.text_content().as_bytes(), fixture(s).as_bytes(), "{s}");
        let images: Vec<_> = msg.images().collect();
        assert_eq!(images.len(), 2, "{s}");
        assert!(matches!(msg.parts.first(), Some(MessagePart::Text(_))));
    }
}

#[test]
fn pairwise_prompt_matches_fixture_and_slot_order() {
    let dir = images_dir();
    let resolver = ImageResolver::new(Some(dir.path().into()));
    let list = &synthetic_dataset(1, 3, 0)[0];
    let (a, b) = (&list.candidates[0], &list.candidates[2]);
    let msg = render_pairwise(&list.query, a, b, &resolver).unwrap();
    assert_eq!(msg.text_content(), fixture(StrategyId::Pairwise));
    let swapped = render_pairwise(&list.query, b, a, &resolver).unwrap();
    assert_eq!(swapped.text_content(), msg.text_content());
    let one: Vec<_> = msg.images().collect();
    let two: Vec<_> = swapped.images().collect();
    assert_eq!(one.len(), 3);
    assert_eq!(one[0], two[0]);
    assert_eq!((one[1], one[2]), (two[2], two[1]));
}

#[test]
fn templates_have_no_trailing_whitespace_and_expected_slots() {
    for s in StrategyId::ALL {
        let t = PromptTemplate::for_strategy(s);
        assert_eq!(t.text.trim_end(), t.text, "{s}");
        let n = t.slots().len();
        assert_eq!(n, if s == StrategyId::Pairwise { 3 } else { 2 }, "{s}");
    }
}
