use prompt_ttt_core::model::{init_params, ArchConfig, Component};
use prompt_ttt_core::protocol::{self, EvalMode, ProtocolConfig};
use prompt_ttt_core::synth::{self, SceneConfig, ShiftSpec, VideoSequence};
use prompt_ttt_core::trainer::{self, TrainConfig};
use prompt_ttt_core::ttt::TttConfig;

fn tiny_videos(arch: &ArchConfig) -> Vec<VideoSequence> {
    let scene = SceneConfig { frames: 2, height: 64, width: 64, ..SceneConfig::default() };
    (0..3).map(|i| synth::generate_video(100 + i, &scene, arch.downsample()).unwrap()).collect()
}

#[test]
fn train_adapt_and_score_a_tiny_video_set() {
    let arch = ArchConfig::default();
    let videos = tiny_videos(&arch);
    let split = synth::split_dataset(videos.len(), 7).unwrap();
    assert_eq!(split.train.len() + split.test.len(), videos.len());

    let train: Vec<_> = split.train.iter().map(|&i| videos[i].clone()).collect();
    let cfg = TrainConfig { epochs: 1, seed: 3, ..TrainConfig::default() };
    let (params, history) = trainer::fit(&train, &arch, &cfg).unwrap();
    assert_eq!(history.epochs.len(), 1);
    assert_ne!(params, init_params(3, &arch).unwrap());

    let target: Vec<_> = split.test.iter().map(|&i| synth::apply_domain_shift(&videos[i], &ShiftSpec::default())).collect();
    let ttt = TttConfig { steps_per_frame: 1, loops: 2, ..TttConfig::default() };
    let proto = ProtocolConfig::default();

    let none = protocol::run_eval(&target, &params, EvalMode::None, &ttt, &proto).unwrap();
    let adapted = protocol::run_eval(&target, &params, EvalMode::PromptTtt, &ttt, &proto).unwrap();
    assert_eq!(none.records.len(), adapted.records.len());

    let pristine = params.digest(&Component::Encoder);
    for o in &adapted.videos {
        assert_eq!(o.start_encoder, pristine);
        assert_ne!(o.final_encoder, pristine);
        let trace = o.trace.as_ref().unwrap();
        assert_eq!(trace.entries.len(), 2 * 2);
        assert!(trace.entries.iter().all(|e| e.loss.is_finite() && e.loss >= 0.0));
    }
    for o in &none.videos {
        assert_eq!(o.final_encoder, pristine);
    }
    for r in none.records.iter().chain(&adapted.records) {
        assert!((0.0..=1.0).contains(&r.dsc));
    }

    // Same inputs, same seeds: the whole protocol is deterministic.
    let again = protocol::run_eval(&target, &params, EvalMode::PromptTtt, &ttt, &proto).unwrap();
    assert_eq!(again.records, adapted.records);
}

#[test]
fn oracle_mode_scores_perfectly() {
    let arch = ArchConfig::default();
    let videos = tiny_videos(&arch);
    let params = init_params(0, &arch).unwrap();
    let rep = protocol::run_eval(&videos[..1], &params, EvalMode::Oracle, &TttConfig::default(), &ProtocolConfig::default()).unwrap();
    assert!(rep.records.iter().all(|r| r.dsc == 1.0 && r.hd95 == Some(0.0)));
}
