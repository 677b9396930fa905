use promptdfo::corpus::{Example, FewShotCorpus, Vocabulary};
use promptdfo::verbalizer::{assemble_m2, tfidf_candidates, Provenance, VerbalizerSet};

fn yelp_like() -> (Vocabulary, FewShotCorpus) {
    let vocab = Vocabulary::new([
        "great", "terrible", "addictive", "sensational", "classic", "boring", "worse", "ugly", "food", "place",
    ])
    .unwrap();
    let ex = |text: &str, label| Example::single(vocab.encode(text).unwrap(), label);
    let train = vec![
        ex("addictive sensational food", 0),
        ex("sensational addictive place", 0),
        ex("boring worse food", 1),
        ex("boring place", 1),
    ];
    let validation = vec![ex("classic food", 0), ex("classic place", 0), ex("ugly place", 1), ex("ugly food", 1)];
    let corpus = FewShotCorpus::new(train, validation, 2, 2).unwrap();
    (vocab, corpus)
}

#[test]
fn yelp_style_words_survive_assembly() {
    let (vocab, corpus) = yelp_like();
    let id = |w: &str| vocab.id(w).unwrap();
    let tfidf = tfidf_candidates(&corpus, &vocab, 3).unwrap();
    // Words shared by both classes carry no weight.
    assert_eq!(tfidf, vec![vec![id("addictive"), id("sensational")], vec![id("boring"), id("worse")]]);

    let manual = vec![vec![id("great")], vec![id("terrible")]];
    let auto = vec![vec![id("classic"), id("worse")], vec![id("worse"), id("ugly")]];
    let set = assemble_m2(&manual, &tfidf, &auto, 4).unwrap();
    let words = |c: usize| -> Vec<&str> { set.class_tokens(c).iter().map(|&t| vocab.token(t).unwrap()).collect() };
    assert_eq!(words(0), ["great", "addictive", "sensational", "classic"]);
    assert_eq!(words(1), ["terrible", "boring", "worse", "ugly"]);
    let sources: Vec<Provenance> = set.class(1).iter().map(|t| t.source).collect();
    assert_eq!(sources, [Provenance::Manual, Provenance::Tfidf, Provenance::Tfidf, Provenance::Auto]);

    let back = VerbalizerSet::from_json(&set.to_json(&vocab).unwrap(), &vocab).unwrap();
    assert_eq!(back, set);
}

#[test]
fn default_cap_keeps_three_words() {
    let (vocab, corpus) = yelp_like();
    let id = |w: &str| vocab.id(w).unwrap();
    let tfidf = tfidf_candidates(&corpus, &vocab, 3).unwrap();
    let set = assemble_m2(&[vec![id("great")], vec![id("terrible")]], &tfidf, &[], 3).unwrap();
    assert_eq!(set.class_tokens(0), vec![id("great"), id("addictive"), id("sensational")]);
    assert_eq!(set.class_tokens(1), vec![id("terrible"), id("boring"), id("worse")]);
}
