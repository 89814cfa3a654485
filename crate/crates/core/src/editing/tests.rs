use super::*;
use crate::attention::AttentionConfig;
use crate::diffusion::build_schedule;
use crate::model::ModelConfig;
use crate::schema::script_to_json;
use crate::textenc::TextEncoderConfig;

fn two_stage_script() -> FineGrainedScript {
    FineGrainedScript {
        fps: 30,
        stages: vec![Stage::uniform(30, "wave"), Stage::uniform(24, "raise")],
    }
}

// --- structured commands ---------------------------------------------------

#[test]
fn adjust_duration_shifts_later_stages() {
    let script = two_stage_script();
    let grown = apply_edit_command(
        &script,
        &EditCommand::AdjustDuration {
            stage: 0,
            delta_frames: 30,
        },
    )
    .unwrap();
    assert_eq!(grown.stages[0].frames, 60);
    assert_eq!(grown.stage_range(1), 60..84);
    assert_eq!(grown.total_frames(), script.total_frames() + 30);

    // Shrinking to nothing is rejected.
    assert!(apply_edit_command(
        &script,
        &EditCommand::AdjustDuration {
            stage: 1,
            delta_frames: -24,
        },
    )
    .is_err());
}

#[test]
fn set_description_is_an_involution() {
    let script = two_stage_script();
    let old = script.stages[1].parts[2].clone();
    let edited = apply_edit_command(
        &script,
        &EditCommand::SetDescription {
            stage: 1,
            part: 2,
            text: "wave high".into(),
        },
    )
    .unwrap();
    assert_eq!(edited.stages[1].parts[2], "wave high");
    let restored = apply_edit_command(
        &edited,
        &EditCommand::SetDescription {
            stage: 1,
            part: 2,
            text: old,
        },
    )
    .unwrap();
    assert_eq!(restored, script);
}

#[test]
fn delete_last_stage_rejected_and_indices_checked() {
    let single = FineGrainedScript::single_stage(30, vec!["hold".into(); NUM_PARTS], "hold".into());
    assert!(apply_edit_command(&single, &EditCommand::DeleteStage { at: 0 }).is_err());
    let script = two_stage_script();
    assert!(apply_edit_command(&script, &EditCommand::DeleteStage { at: 5 }).is_err());
    assert!(apply_edit_command(
        &script,
        &EditCommand::SetDescription {
            stage: 0,
            part: 9,
            text: "x".into()
        }
    )
    .is_err());
    let deleted = apply_edit_command(&script, &EditCommand::DeleteStage { at: 0 }).unwrap();
    assert_eq!(deleted.num_stages(), 1);
    assert_eq!(deleted.stages[0].overall, "raise");
}

#[test]
fn insert_stage_positions() {
    let script = two_stage_script();
    let inserted = apply_edit_command(
        &script,
        &EditCommand::InsertStage {
            at: 1,
            stage: Stage::uniform(10, "hold"),
        },
    )
    .unwrap();
    assert_eq!(inserted.num_stages(), 3);
    assert_eq!(inserted.stages[1].overall, "hold");
}

// --- prompts -----------------------------------------------------------------

#[test]
fn creation_prompt_contains_verbatim_template() {
    let p = render_prompt(None, "wave both arms").unwrap();
    match &p {
        RenderedPrompt::Creation(text) => {
            assert!(text.contains("the lasting frames (30 frames per second)"));
            assert!(text.contains(CREATION_TEMPLATE));
            assert!(text.contains("\"wave both arms\""));
        }
        _ => panic!("expected creation prompt"),
    }
}

#[test]
fn edit_prompt_quotes_command_and_embeds_script() {
    let script = two_stage_script();
    let p = render_prompt(Some(&script), "extend stage 2 by 1 second").unwrap();
    match &p {
        RenderedPrompt::Edit(text) => {
            assert!(text.contains("\"extend stage 2 by 1 second\""));
            assert!(text.contains(EDIT_TEMPLATE_PREFIX));
            assert!(text.contains(EDIT_TEMPLATE_SUFFIX));
            assert!(text.contains(&script_to_json(&script)));
        }
        _ => panic!("expected edit prompt"),
    }
}

#[test]
fn empty_command_rejected() {
    assert!(render_prompt(None, "   ").is_err());
    let script = two_stage_script();
    assert!(render_prompt(Some(&script), "").is_err());
}

// --- response parsing -----------------------------------------------------------

#[test]
fn parse_tolerates_surrounding_prose() {
    let script = two_stage_script();
    let response = format!(
        "Of course! Here you go:\n```json\n{}\n```\nAnything else?",
        script_to_json(&script)
    );
    let parsed = parse_script_response(&response).unwrap();
    assert_eq!(parsed, script);
}

#[test]
fn parse_roundtrip_is_identity() {
    let script = two_stage_script();
    let parsed = parse_script_response(&script_to_json(&script)).unwrap();
    assert_eq!(parsed, script);
}

#[test]
fn parse_failure_modes_distinct() {
    match parse_script_response("no structured data here") {
        Err(CoreError::NoJsonFound) => {}
        other => panic!("expected NoJsonFound, got {other:?}"),
    }
    let missing = r#"{"fps":30,"stages":[{"frames":30,"overall":"x","parts":{
        "head":"a","spine":"b","left_arm":"c","right_arm":"d","left_leg":"e",
        "right_leg":"f"}}]}"#;
    match parse_script_response(missing) {
        Err(CoreError::SchemaMismatch(msg)) => assert!(msg.contains("pelvis_trajectory")),
        other => panic!("expected schema mismatch, got {other:?}"),
    }
    let empty_stage = r#"{"fps":30,"stages":[]}"#;
    match parse_script_response(empty_stage) {
        Err(CoreError::Validation(_)) => {}
        other => panic!("expected validation failure, got {other:?}"),
    }
}

#[test]
fn extract_json_handles_braces_in_strings() {
    let text = r#"note {"a": "brace } in string", "b": {"c": 1}} trailing {"d": 2}"#;
    let json = extract_first_json(text).unwrap();
    assert_eq!(json, r#"{"a": "brace } in string", "b": {"c": 1}}"#);
}

// --- mock client ------------------------------------------------------------------

#[test]
fn mock_applies_extend_command() {
    let script = two_stage_script();
    let prompt = render_prompt(Some(&script), "extend stage 2 by 1 second").unwrap();
    let response = MockLlmClient::new().complete(prompt.text()).unwrap();
    let edited = parse_script_response(&response).unwrap();
    assert_eq!(edited.stages[1].frames, script.stages[1].frames + 30);
    assert_eq!(edited.stages[0], script.stages[0]);
}

#[test]
fn mock_grammar_covers_commands() {
    let script = two_stage_script();
    let mock = MockLlmClient::new();
    let run = |cmd: &str| -> FineGrainedScript {
        let p = render_prompt(Some(&script), cmd).unwrap();
        parse_script_response(&mock.complete(p.text()).unwrap()).unwrap()
    };

    assert_eq!(run("shorten stage 1 by 10 frames").stages[0].frames, 20);
    assert_eq!(
        run("set stage 2 left arm to wave high").stages[1].parts[2],
        "wave high"
    );
    assert_eq!(
        run("set stage 1 overall to a slow stretch").stages[0].overall,
        "a slow stretch"
    );
    assert_eq!(run("make the right leg twist in stage 2").stages[1].parts[5], "twist");
    assert_eq!(run("insert stage at 2 lasting 15 frames").num_stages(), 3);
    assert_eq!(run("append stage lasting 1 second").stages[2].frames, 30);
    assert_eq!(run("delete stage 1").num_stages(), 1);

    let p = render_prompt(Some(&script), "do something impossible").unwrap();
    assert!(mock.complete(p.text()).is_err());
}

#[test]
fn mock_creation_builds_script_from_sentence() {
    let prompt = render_prompt(
        None,
        "wave the left arm for 2 seconds then raise the right leg",
    )
    .unwrap();
    let response = MockLlmClient::new().complete(prompt.text()).unwrap();
    let script = parse_script_response(&response).unwrap();
    assert_eq!(script.num_stages(), 2);
    assert_eq!(script.stages[0].frames, 60);
    assert_eq!(script.stages[0].parts[2], "wave");
    assert_eq!(script.stages[0].parts[0], "hold");
    assert_eq!(script.stages[1].parts[5], "raise");
}

#[test]
fn part_phrases_resolve() {
    assert_eq!(part_index_from_phrase("left arm"), Some(2));
    assert_eq!(part_index_from_phrase("pelvis"), Some(6));
    assert_eq!(part_index_from_phrase("spine"), Some(1));
    assert_eq!(part_index_from_phrase("tail"), None);
}

// --- sessions ----------------------------------------------------------------------

fn session_model() -> Denoiser<f32> {
    let cfg = ModelConfig {
        layers: 1,
        feature_dim: 14,
        time_embed_dim: 8,
        fps: 30,
        attention: AttentionConfig {
            groups: 7,
            templates_per_group: 2,
            latent_per_group: 4,
            sigma: 0.5,
            experts: 2,
            active_experts: 1,
            text_width: 6,
            ffn_mult: 2,
            spatial_independence: true,
            temporal_independence: true,
            moe: true,
        },
        text: TextEncoderConfig {
            width: 6,
            layers: 1,
        },
    };
    Denoiser::new(cfg, 11).unwrap()
}

fn session_config() -> SessionConfig {
    SessionConfig {
        sampler: SamplerConfig {
            steps: 4,
            guidance_weight: 1.0,
        },
        base_seed: 5,
    }
}

#[test]
fn session_step_regenerates_with_grown_length() {
    let model = session_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let (mut session, initial) =
        EditSession::new(&model, schedule, session_config(), two_stage_script()).unwrap();
    assert_eq!(initial.num_frames(), 54);
    let (script, motion) = session
        .step("extend stage 2 by 1 second", &MockLlmClient::new())
        .unwrap();
    assert_eq!(script.total_frames(), 84);
    assert_eq!(motion.num_frames(), 84);
    assert_eq!(session.history().len(), 1);
}

#[test]
fn failing_client_leaves_session_unchanged() {
    let model = session_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let (mut session, _) =
        EditSession::new(&model, schedule, session_config(), two_stage_script()).unwrap();
    let before = session.script().clone();
    let failing = FailingClient::new(MockLlmClient::new(), 0);
    assert!(session.step("delete stage 1", &failing).is_err());
    assert_eq!(session.script(), &before);
    assert!(session.history().is_empty());

    // A client that answers garbage also leaves the session untouched.
    struct Garbage;
    impl LlmClient for Garbage {
        fn complete(&self, _p: &str) -> crate::error::Result<String> {
            Ok("I will not produce structured output.".into())
        }
    }
    assert!(session.step("delete stage 1", &Garbage).is_err());
    assert_eq!(session.script(), &before);

    // The same step afterwards succeeds and regenerates.
    let (script, _) = session.step("delete stage 1", &MockLlmClient::new()).unwrap();
    assert_eq!(script.num_stages(), 1);
}

#[test]
fn identical_sessions_are_deterministic() {
    let model = session_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let commands = ["extend stage 1 by 5 frames", "make the head raise in stage 2"];
    let run = || {
        let (mut s, first) = EditSession::new(
            &model,
            schedule.clone(),
            session_config(),
            two_stage_script(),
        )
        .unwrap();
        let mut outs = vec![first];
        for c in commands {
            outs.push(s.step(c, &MockLlmClient::new()).unwrap().1);
        }
        outs
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.frames, y.frames);
    }
}

#[test]
fn structured_apply_bypasses_llm() {
    let model = session_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let (mut session, _) =
        EditSession::new(&model, schedule, session_config(), two_stage_script()).unwrap();
    let (script, motion) = session
        .apply(&EditCommand::SetOverall {
            stage: 0,
            text: "circle".into(),
        })
        .unwrap();
    assert_eq!(script.stages[0].overall, "circle");
    assert_eq!(motion.num_frames(), script.total_frames());
}
