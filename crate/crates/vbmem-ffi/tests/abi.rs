//! Exercises the C ABI from Rust (status codes, error messages, ownership)
//! and compiles and runs the bundled C demo against the built shared
//! library.

use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use vbmem_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(vbm_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn synth_write_score_generate_cycle() {
    unsafe {
        let mut episode: *mut VbmEpisode = ptr::null_mut();
        let mut spec: *mut VbmSpec = ptr::null_mut();
        assert_eq!(
            vbm_episode_synth(12, 4, 6, 1.0, 1.0, 9, &mut episode, &mut spec),
            VbmStatus::Ok
        );
        assert_eq!(vbm_episode_len(episode), 12);

        let mut result: *mut VbmResult = ptr::null_mut();
        assert_eq!(
            vbm_write_episode(spec, episode, 20, VbmInit::Prior, 0, true, &mut result),
            VbmStatus::Ok
        );

        let mut elbo = f64::NAN;
        assert_eq!(vbm_result_final_elbo(result, &mut elbo), VbmStatus::Ok);
        assert!(elbo.is_finite());

        let mut breakdown = VbmElboBreakdown {
            recon: 0.0,
            code_kl: 0.0,
            address_kl: 0.0,
            memory_kl: 0.0,
            total: 0.0,
        };
        assert_eq!(
            vbm_elbo_closed_form(episode, result, &mut breakdown),
            VbmStatus::Ok
        );
        assert!((breakdown.total - elbo).abs() < 1e-9);

        let mut estimate = 0.0;
        let mut std_error = 0.0;
        assert_eq!(
            vbm_elbo_monte_carlo(episode, result, 20_000, 3, &mut estimate, &mut std_error),
            VbmStatus::Ok
        );
        assert!(
            (estimate - breakdown.total).abs() <= 3.0 * std_error + 1e-9 * (1.0 + estimate.abs()),
            "mc {estimate} vs closed {} (se {std_error})",
            breakdown.total
        );

        let mut baseline: *mut VbmResult = ptr::null_mut();
        assert_eq!(
            vbm_baseline_write(
                spec,
                episode,
                VbmBaseline::BatchedIterative,
                10,
                &mut baseline
            ),
            VbmStatus::Ok
        );
        let mut baseline_elbo = f64::NAN;
        assert_eq!(
            vbm_result_final_elbo(baseline, &mut baseline_elbo),
            VbmStatus::Ok
        );
        assert!(elbo >= baseline_elbo - 1e-9);

        let mut samples: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(vbm_generate_direct(result, 4, 1, &mut samples), VbmStatus::Ok);
        let parsed: Vec<Vec<f64>> =
            serde_json::from_str(CStr::from_ptr(samples).to_str().unwrap()).unwrap();
        assert_eq!(parsed.len(), 4);
        assert!(parsed.iter().all(|s| s.len() == 6));
        vbm_string_free(samples);

        let mut chain: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(
            vbm_generate_iterative(result, 3, 2, &mut chain),
            VbmStatus::Ok
        );
        let parsed: Vec<Vec<f64>> =
            serde_json::from_str(CStr::from_ptr(chain).to_str().unwrap()).unwrap();
        assert_eq!(parsed.len(), 3);
        vbm_string_free(chain);

        // Result JSON round trip through the ABI.
        let mut json: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(vbm_result_to_json(result, &mut json), VbmStatus::Ok);
        let mut restored: *mut VbmResult = ptr::null_mut();
        assert_eq!(vbm_result_from_json(json, &mut restored), VbmStatus::Ok);
        let mut restored_elbo = f64::NAN;
        assert_eq!(
            vbm_result_final_elbo(restored, &mut restored_elbo),
            VbmStatus::Ok
        );
        assert_eq!(restored_elbo, elbo);
        vbm_string_free(json);
        vbm_result_free(restored);

        vbm_result_free(baseline);
        vbm_result_free(result);
        vbm_episode_free(episode);
        vbm_spec_free(spec);
    }
}

#[test]
fn error_paths_report_status_and_message() {
    unsafe {
        let mut out: *mut VbmEpisode = ptr::null_mut();
        assert_eq!(
            vbm_episode_from_json(ptr::null(), &mut out),
            VbmStatus::NullPointer
        );
        assert!(last_error().contains("null"));

        let bad = CString::new("{\"observed\": true}").unwrap();
        assert_eq!(
            vbm_episode_from_json(bad.as_ptr(), &mut out),
            VbmStatus::Parse
        );
        assert!(last_error().contains("schema"), "message: {}", last_error());

        let negative = CString::new(
            "{\"observed\": false, \"codes\": [{\"mean\": [0.0], \"var\": [-1.0]}], \"provenance\": \"\"}",
        )
        .unwrap();
        assert_eq!(
            vbm_episode_from_json(negative.as_ptr(), &mut out),
            VbmStatus::InvalidArgument
        );
        assert!(
            last_error().contains("negative variance"),
            "message: {}",
            last_error()
        );

        let mut spec: *mut VbmSpec = ptr::null_mut();
        // A partition count that does not divide the code dimension.
        assert_eq!(
            vbm_spec_create(VbmVariant::Tree, 2, 5, 2, 2, 1.0, &mut spec),
            VbmStatus::InvalidArgument
        );

        // Baselines reject non-gaussian variants.
        assert_eq!(
            vbm_spec_create(VbmVariant::Mixture, 2, 4, 2, 1, 1.0, &mut spec),
            VbmStatus::Ok
        );
        let mut episode: *mut VbmEpisode = ptr::null_mut();
        assert_eq!(
            vbm_episode_synth(4, 2, 4, 1.0, 1.0, 0, &mut episode, ptr::null_mut()),
            VbmStatus::Ok
        );
        let mut result: *mut VbmResult = ptr::null_mut();
        assert_eq!(
            vbm_baseline_write(
                spec,
                episode,
                VbmBaseline::OnlineNonIterative,
                0,
                &mut result
            ),
            VbmStatus::InvalidArgument
        );
        vbm_episode_free(episode);
        vbm_spec_free(spec);
    }
}

#[test]
fn c_demo_compiles_and_runs() {
    // The test binary lives in target/<profile>/deps; the shared library
    // one directory up.
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe
        .parent()
        .and_then(|deps| deps.parent())
        .expect("test binary under target/<profile>/deps")
        .to_path_buf();
    let lib = profile_dir.join("libvbmem_ffi.so");
    assert!(lib.exists(), "shared library not found at {}", lib.display());

    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let out = profile_dir.join("vbmem_ffi_c_demo");
    let compile = Command::new("cc")
        .arg(manifest.join("examples/demo.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&profile_dir)
        .arg("-lvbmem_ffi")
        .arg("-lm")
        .arg("-o")
        .arg(&out)
        .output()
        .expect("cc is available");
    assert!(
        compile.status.success(),
        "cc failed: {}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&out)
        .env("LD_LIBRARY_PATH", &profile_dir)
        .output()
        .expect("demo runs");
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(
        run.status.success() && stdout.contains("DEMO OK"),
        "demo failed: stdout {stdout:?} stderr {:?}",
        String::from_utf8_lossy(&run.stderr)
    );
}
