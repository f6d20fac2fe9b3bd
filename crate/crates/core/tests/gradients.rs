mod common;

use stylecycle_core::train::{CycleDecode, CycleMode, RealInput, StepConfig, Term};

use common::{gradient_check, TinyProblem};

fn check(term: Term, cfg: &StepConfig) {
    let p = TinyProblem::new(11);
    let c = gradient_check(&p, cfg, term, 1e-3, 1e-7);
    assert!(c.value.is_finite());
    assert!(c.coordinates > 50, "{term:?}: only {} coordinates", c.coordinates);
    assert!(c.fraction() >= 0.99, "{term:?}: {}/{} agree, worst {}", c.passed, c.coordinates, c.worst_relative);
}

fn cfg() -> StepConfig {
    StepConfig { cycle_mode: CycleMode::TeacherLength, ..StepConfig::default() }
}

#[test]
fn reconstruction() {
    check(Term::Rec, &cfg());
}

#[test]
fn adversarial_discriminator_view() {
    check(Term::AdvD, &cfg());
    check(Term::AdvD, &StepConfig { real_input: RealInput::GroundTruth, ..cfg() });
}

#[test]
fn adversarial_generator_view() {
    check(Term::AdvG, &cfg());
}

#[test]
fn style_distortion() {
    check(Term::Dis, &cfg());
}

#[test]
fn cycle_consistency() {
    check(Term::Cyc, &cfg());
    check(Term::Cyc, &StepConfig { cycle_decode: CycleDecode::OwnPredictions, ..cfg() });
}
