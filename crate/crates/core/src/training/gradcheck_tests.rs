use super::gradcheck::*;
use super::LossWeights;
use crate::codec::{Architecture, CodecConfig, CodecModel};
use crate::distortion::DistortionKind;

fn probe_model() -> CodecModel {
    CodecModel::init(CodecConfig::probe(Architecture::MultiHeadAux), 41).unwrap()
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let model = probe_model();
    let probe = ProbeConfig::default(); // resilience weight 10
    let report = gradient_check(&model, LossTerm::Total, &probe).unwrap();
    assert!(
        report.passes(1e-3),
        "total loss gradcheck failed: {report}\nworst: {:?}",
        report.worst.first()
    );
}

#[test]
fn image_loss_gradients_are_near_exact() {
    let model = probe_model();
    let probe = ProbeConfig::default();
    let report = gradient_check(&model, LossTerm::Image, &probe).unwrap();
    assert!(
        report.passes(1e-6),
        "image loss gradcheck failed: {report}\nworst: {:?}",
        report.worst.first()
    );
}

#[test]
fn decoder_and_adversarial_and_resilience_gradients_match() {
    let model = probe_model();
    // Sampled subset keeps the full-term sweep fast.
    let probe = ProbeConfig {
        coords_per_tensor: Some(6),
        ..ProbeConfig::default()
    };
    for term in [
        LossTerm::Decoder,
        LossTerm::AdversarialGen,
        LossTerm::Resilience,
    ] {
        let report = gradient_check(&model, term, &probe).unwrap();
        assert!(
            report.passes(1e-3),
            "{term:?} gradcheck failed: {report}"
        );
    }
}

#[test]
fn gradients_flow_through_nonidentity_distortions() {
    let model = probe_model();
    for kind in [
        DistortionKind::GaussianNoise { sigma: 0.02 },
        DistortionKind::GaussianBlur {
            kernel_size: 3,
            sigma: 1.0,
        },
        DistortionKind::Dropout { keep_prob: 0.7 },
        DistortionKind::CropResize { crop_fraction: 0.8 },
    ] {
        let probe = ProbeConfig {
            distortion: kind.clone(),
            coords_per_tensor: Some(4),
            ..ProbeConfig::default()
        };
        let report = gradient_check(&model, LossTerm::Decoder, &probe).unwrap();
        assert!(
            report.passes(1e-3),
            "decoder loss through {kind:?} failed: {report}"
        );
    }
}

#[test]
fn frozen_components_are_excluded_from_the_report() {
    let model = probe_model();
    let probe = ProbeConfig {
        freeze: ComponentMask {
            discriminator: true,
            ..ComponentMask::default()
        },
        coords_per_tensor: Some(2),
        ..ProbeConfig::default()
    };
    let report = gradient_check(&model, LossTerm::Total, &probe).unwrap();
    assert!(report
        .worst
        .iter()
        .all(|e| e.component != "discriminator"));

    // Unfrozen check does include the discriminator (via the stealth term).
    let probe_all = ProbeConfig {
        coords_per_tensor: Some(2),
        ..ProbeConfig::default()
    };
    let full = gradient_check(&model, LossTerm::AdversarialGen, &probe_all).unwrap();
    assert!(full.coords_checked > report.coords_checked);
}

#[test]
fn single_head_probe_also_passes() {
    let model = CodecModel::init(CodecConfig::probe(Architecture::SingleHead), 43).unwrap();
    let probe = ProbeConfig {
        coords_per_tensor: Some(8),
        ..ProbeConfig::default()
    };
    let report = gradient_check(&model, LossTerm::Total, &probe).unwrap();
    assert!(report.passes(1e-3), "{report}");
}
