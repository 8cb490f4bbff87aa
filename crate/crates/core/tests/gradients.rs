use stra_core::verify::suites::{gradient_suite, SuiteModule};

fn run(module: SuiteModule) {
    let reports = gradient_suite(module, 3, 100, 1e-4).unwrap();
    assert!(!reports.is_empty());
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
    assert!(failed.is_empty(), "{}", failed.concat());
}

#[test]
fn local_attention_backward() {
    run(SuiteModule::Local);
}

#[test]
fn mode_attention_backward() {
    run(SuiteModule::Mode);
}

#[test]
fn block_backward() {
    run(SuiteModule::Block);
}

#[test]
fn loss_backward() {
    run(SuiteModule::Losses);
}

#[test]
fn primitive_backward() {
    run(SuiteModule::Primitives);
}

#[test]
fn network_backward() {
    run(SuiteModule::Network);
}
