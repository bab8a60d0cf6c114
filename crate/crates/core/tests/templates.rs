use std::path::PathBuf;

use empathic_core::corpus::{
    load_corpus, render_template, DialogueHistory, LoadOptions, Role, TemplateFormat, Turn,
};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn fixture() -> DialogueHistory {
    let report = load_corpus(&data("dia20002.json"), LoadOptions::default()).unwrap();
    assert!(report.errors.is_empty(), "{:?}", report.errors);
    assert_eq!(report.dialogues.len(), 1);
    report.dialogues.into_iter().next().unwrap()
}

#[test]
fn fixture_has_five_history_turns_and_a_target() {
    let d = fixture();
    assert_eq!(d.dialogue_id, "dia20002");
    assert_eq!(d.turns.len(), 5);
    assert_eq!(d.target.role, Role::Listener);
    assert!(d.turns[0]
        .audio_path
        .as_ref()
        .unwrap()
        .ends_with("dia20002utt0_51.wav"));
}

#[test]
fn renderings_match_golden_files() {
    let d = fixture();
    for (format, file) in [
        (TemplateFormat::Qwen, "dia20002.qwen.txt"),
        (TemplateFormat::Llama, "dia20002.llama.txt"),
    ] {
        let golden = std::fs::read_to_string(data(file)).unwrap();
        assert_eq!(render_template(&d, format, true).text, golden, "{format}");
    }
}

#[test]
fn one_turn_renderings_match_golden_files() {
    let d = DialogueHistory::from_turns(
        "one",
        vec![
            Turn::new(0, Role::Speaker, "How are you?"),
            Turn::new(1, Role::Listener, "Doing well, thanks."),
        ],
    )
    .unwrap();
    for (format, file) in [
        (TemplateFormat::Qwen, "one_turn.qwen.txt"),
        (TemplateFormat::Llama, "one_turn.llama.txt"),
    ] {
        let golden = std::fs::read_to_string(data(file)).unwrap();
        assert_eq!(render_template(&d, format, true).text, golden, "{format}");
    }
}

#[test]
fn prefix_law() {
    let d = fixture();
    for format in [TemplateFormat::Qwen, TemplateFormat::Llama] {
        let with = render_template(&d, format, true);
        let without = render_template(&d, format, false);
        assert!(with.text.starts_with(&without.text));
        assert!(with.text.len() > without.text.len());
        assert_eq!(without.target, None);
    }
}
