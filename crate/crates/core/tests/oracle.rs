//! Corpus-wide equivalence: every image produced by the full optimization
//! pipeline must agree with a plain tree-walking interpretation of the
//! transport form, on seeded random inputs, with traps matching too.

mod common;

use adaptvm_core::loader::load_module;
use adaptvm_core::optimizer::phases::standard_phases;
use adaptvm_core::optimizer::{OptimizationSystem, PhaseContext};
use adaptvm_core::profiling::{InstrumentationRegistry, ProfilingSystem};
use adaptvm_core::reference::ReferenceInterpreter;
use adaptvm_core::similarity::SimilarityParams;
use adaptvm_core::vm::{Value, Vm};

use common::{fuzz_corpus, hand_corpus, random_inputs, Case};

fn check_case(case: &Case, inputs_per_case: usize, input_seed: u64) -> usize {
    let mut vm = Vm::new();
    load_module(&case.module, &mut vm).unwrap();
    let profiles = ProfilingSystem::new(SimilarityParams::default());
    let registry = InstrumentationRegistry::shared();
    let mut opt = OptimizationSystem::new();
    for phase in standard_phases(&registry) {
        opt.register_phase(phase).unwrap();
    }
    // Optimize every procedure in the module, not just the one under test,
    // so calls land on optimized callees as well.
    let names = vm.procedure_names();
    for name in names {
        let outcome = {
            let ctx = PhaseContext { vm: &vm, profiles: &profiles, registry: &registry };
            opt.optimize(&name, &ctx).unwrap()
        };
        let old = vm.lookup_procedure(&name).unwrap();
        let new = vm.stage_image(outcome.image);
        vm.rebind(&name, new);
        vm.discard_image(old);
    }

    let inputs = random_inputs(input_seed, case.nparams, inputs_per_case);
    let mut checked = 0;
    for input in &inputs {
        let expected = ReferenceInterpreter::new(&case.module).invoke(&case.proc, input);
        let got = vm.invoke(&case.proc, input.iter().map(|&n| Value::Int(n)).collect());
        match (&expected, &got) {
            (Ok(e), Ok(Value::Int(g))) => assert_eq!(
                e, g,
                "module {} proc {} diverged on {input:?}",
                case.module.name, case.proc
            ),
            (Err(_), Err(_)) => {}
            _ => panic!(
                "module {} proc {} diverged on {input:?}: {expected:?} vs {got:?}",
                case.module.name, case.proc
            ),
        }
        checked += 1;
    }
    checked
}

#[test]
fn hand_written_corpus_matches_oracle() {
    for case in hand_corpus() {
        check_case(&case, 50, 07_01);
    }
}

#[test]
fn fuzzed_corpus_matches_oracle() {
    let corpus = fuzz_corpus(4242, 15);
    assert!(corpus.len() + hand_corpus().len() >= 20);
    for case in &corpus {
        check_case(case, 50, 9_09);
    }
}

#[test]
fn corpus_covers_a_thousand_seeded_inputs() {
    let mut total = 0;
    for case in hand_corpus() {
        total += check_case(&case, 40, 11);
    }
    for case in fuzz_corpus(777, 15) {
        total += check_case(&case, 40, 13);
    }
    assert!(total >= 1000, "only {total} inputs checked");
}
