use super::*;
use crate::autodiff::finite_diff_check;
use crate::autodiff::mlp::bias_name;

fn zero_prefix(params: &mut ParameterSet, prefix: &str) {
    let names: Vec<String> = params.subset(&format!("{prefix}.")).names().map(str::to_string).collect();
    for n in names {
        let (r, c) = params.get(&n).unwrap().shape();
        params.set(&n, Matrix::zeros(r, c)).unwrap();
    }
}

fn zero_last_layer(model: &mut MultimodalModel, prefix: &str, layers: usize) {
    let w = weight_name(prefix, layers - 1);
    let b = bias_name(prefix, layers - 1);
    let (r, c) = model.params.get(&w).unwrap().shape();
    model.params.set(&w, Matrix::zeros(r, c)).unwrap();
    model.params.set(&b, Matrix::zeros(1, c)).unwrap();
}

fn tanh_config(dims: Vec<usize>, strategy: Strategy) -> ModelConfig {
    let mut c = ModelConfig::new(dims, strategy);
    c.hidden = vec![5];
    c.activation = Activation::Tanh;
    c
}

/// Single-hidden-layer identity-activation model whose encoder mean and decoder are the identity.
fn identity_model(dim: usize, strategy: Strategy, modalities: usize) -> MultimodalModel {
    let mut c = ModelConfig::new(vec![dim; modalities], strategy);
    c.latent_dim = dim;
    c.hidden = vec![dim];
    c.activation = Activation::Identity;
    let mut model = MultimodalModel::init(c, &RngStream::new(0)).unwrap();
    for m in 0..modalities {
        zero_prefix(&mut model.params, &encoder_prefix(m));
        zero_prefix(&mut model.params, &decoder_prefix(m));
        model.params.set(&weight_name(&encoder_prefix(m), 0), Matrix::identity(dim)).unwrap();
        let mut head = Matrix::zeros(dim, 2 * dim);
        for i in 0..dim {
            head.set(i, i, 1.0);
        }
        model.params.set(&weight_name(&encoder_prefix(m), 1), head).unwrap();
        model.params.set(&weight_name(&decoder_prefix(m), 0), Matrix::identity(dim)).unwrap();
        model.params.set(&weight_name(&decoder_prefix(m), 1), Matrix::identity(dim)).unwrap();
    }
    model
}

fn random_input(rng: &mut RngStream, dims: &[usize], rows: usize) -> Vec<Matrix> {
    dims.iter().map(|&d| rng.normal_matrix(rows, d)).collect()
}

#[test]
fn zero_heads_encode_standard_normal() {
    let mut model = MultimodalModel::init(ModelConfig::new(vec![4, 3], Strategy::Mmvm), &RngStream::new(1)).unwrap();
    zero_last_layer(&mut model, "enc1", 3);
    let g = model.encode(1, &[1.0, -2.0, 7.0]).unwrap();
    assert_eq!(g.mean(), &[0.0, 0.0]);
    assert_eq!(g.stddev(), &[1.0, 1.0]);
}

#[test]
fn saturated_logvar_hits_clamp_floor() {
    let mut model = MultimodalModel::init(ModelConfig::new(vec![4], Strategy::Independent), &RngStream::new(1)).unwrap();
    zero_last_layer(&mut model, "enc0", 3);
    model.params.set(&bias_name("enc0", 2), Matrix::row_vector(vec![0.0, 0.0, -40.0, -40.0])).unwrap();
    let g = model.encode(0, &[0.3, 0.1, 0.0, 1.0]).unwrap();
    assert_eq!(g.stddev(), &[(-5.0f64).exp(), (-5.0f64).exp()]);
}

#[test]
fn encode_log_prob_gradient() {
    let model = MultimodalModel::init(tanh_config(vec![3], Strategy::Independent), &RngStream::new(4)).unwrap();
    let mut rng = RngStream::new(5);
    let x = rng.normal_matrix(2, 3);
    let z = rng.normal_matrix(2, 2);
    let err = finite_diff_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let g = model.encode_on_tape(t, v, 0, xv)?;
            let zv = t.constant(z.clone());
            let lp = g.log_prob(t, zv);
            Ok(t.sum(lp))
        },
        &model.params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn decoder_cases() {
    let mut model = MultimodalModel::init(ModelConfig::new(vec![5], Strategy::Independent), &RngStream::new(2)).unwrap();
    zero_prefix(&mut model.params, "dec0");
    assert_eq!(model.decode(0, &[0.4, -3.0]).unwrap(), vec![0.0; 5]);

    let id = identity_model(3, Strategy::Independent, 1);
    assert_eq!(id.decode(0, &[0.4, -3.0, 1.5]).unwrap(), vec![0.4, -3.0, 1.5]);
    assert!(id.decode(0, &[0.4]).is_err());
    assert!(id.decode(1, &[0.4, 0.0, 0.0]).is_err());
}

#[test]
fn reconstruction_log_likelihood_gradient() {
    for family in [LikelihoodFamily::GaussianFixedScale, LikelihoodFamily::LaplaceFixedScale] {
        let mut cfg = tanh_config(vec![4], Strategy::Independent);
        cfg.likelihood = vec![family];
        cfg.likelihood_scale = 0.75;
        let model = MultimodalModel::init(cfg, &RngStream::new(6)).unwrap();
        let mut rng = RngStream::new(7);
        let z = rng.normal_matrix(3, 2);
        let x = rng.normal_matrix(3, 4).map(|v| 3.0 * v);
        let err = finite_diff_check(
            |t, v| {
                let zv = t.constant(z.clone());
                let loc = model.decode_on_tape(t, v, 0, zv)?;
                let xv = t.constant(x.clone());
                let ll = model.log_lik_on_tape(t, 0, loc, xv);
                Ok(t.sum(ll))
            },
            &model.params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{family:?}: {err}");
    }
}

#[test]
fn reconstruct_total_is_sum_of_modalities() {
    for strategy in Strategy::ALL {
        let model = MultimodalModel::init(ModelConfig::new(vec![3, 4, 2], strategy), &RngStream::new(8)).unwrap();
        let mut rng = RngStream::new(9);
        let sample: Vec<Vec<f64>> = [3, 4, 2].iter().map(|&d| rng.normal_vec(d)).collect();
        let out = model.reconstruct(&sample, &mut RngStream::new(10)).unwrap();
        assert_eq!(out.len(), 3);
        if matches!(strategy, Strategy::Independent | Strategy::Mmvm | Strategy::Avg | Strategy::Poe) {
            for (m, (loc, ll)) in out.iter().enumerate() {
                let again = model.log_likelihood(m, loc, &sample[m]).unwrap();
                assert!((again - ll).abs() < 1e-12);
            }
        }
        let total: f64 = out.iter().map(|(_, ll)| ll).sum();
        let inputs: Vec<Matrix> = sample.iter().map(|x| Matrix::row_vector(x.clone())).collect();
        let noise = Noise::sample(&model.config, 1, &mut RngStream::new(10));
        let rec = model.reconstruct_batch(&inputs, &noise).unwrap();
        // recompute each modality independently from the decoded locations
        let mut recomputed = 0.0;
        for m in 0..3 {
            let k = rec.locations[m].len() as f64;
            recomputed += rec.locations[m]
                .iter()
                .map(|l| model.log_likelihood(m, l.data(), &sample[m]).unwrap())
                .sum::<f64>()
                / k;
        }
        assert!((total - recomputed).abs() < 1e-12, "{strategy}");
    }
    let model = MultimodalModel::init(ModelConfig::new(vec![3, 4], Strategy::Mmvm), &RngStream::new(8)).unwrap();
    assert!(model.reconstruct(&[vec![0.0; 3]], &mut RngStream::new(0)).is_err());
}

#[test]
fn independent_single_modality_is_plain_vae() {
    let model = MultimodalModel::init(ModelConfig::new(vec![3], Strategy::Independent), &RngStream::new(3)).unwrap();
    let x = vec![0.5, -1.0, 2.0];
    let eps = RngStream::new(4).normal_vec(2);
    let q = model.encode(0, &x).unwrap();
    let z = q.sample_with_noise(&eps).unwrap();
    let loc = model.decode(0, &z).unwrap();
    let want = model.log_likelihood(0, &loc, &x).unwrap();
    let noise = Noise { slots: vec![Matrix::row_vector(eps)] };
    let rec = model.reconstruct_batch(&[Matrix::row_vector(x)], &noise).unwrap();
    assert!((rec.log_lik[0][0] - want).abs() < 1e-12);
    assert!(rec.locations[0][0].data().iter().zip(&loc).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn avg_with_identical_posteriors_matches_independent() {
    let base = MultimodalModel::init(ModelConfig::new(vec![3, 3], Strategy::Independent), &RngStream::new(3)).unwrap();
    // copy encoder 0 into encoder 1 so both posteriors coincide on identical inputs
    let mut params = base.params.clone();
    for (name, value) in base.params.subset("enc0.").iter() {
        params.set(&name.replacen("enc0", "enc1", 1), value.clone()).unwrap();
    }
    let ind = MultimodalModel { config: base.config.clone(), params: params.clone() };
    let mut avg_cfg = base.config.clone();
    avg_cfg.strategy = Strategy::Avg;
    let avg = MultimodalModel { config: avg_cfg, params };
    let x = Matrix::row_vector(vec![0.2, -0.7, 1.1]);
    let eps = RngStream::new(5).normal_matrix(1, 2);
    let a = avg.reconstruct_batch(&[x.clone(), x.clone()], &Noise { slots: vec![eps.clone()] }).unwrap();
    let i = ind.reconstruct_batch(&[x.clone(), x], &Noise { slots: vec![eps.clone(), eps] }).unwrap();
    for m in 0..2 {
        assert!((a.log_lik[m][0] - i.log_lik[m][0]).abs() < 1e-12);
    }
}

#[test]
fn conditional_generation_cases() {
    let model = MultimodalModel::init(ModelConfig::new(vec![3, 4], Strategy::Mmvm), &RngStream::new(12)).unwrap();
    let x = vec![0.3, 0.2, -0.1];
    let mut rng = RngStream::new(0);
    let self_path = model.conditional_generate(0, 0, &x, true, &mut rng).unwrap();
    let q = model.encode(0, &x).unwrap();
    assert_eq!(self_path, model.decode(0, q.mean()).unwrap());

    let cross = model.conditional_generate(0, 1, &x, false, &mut rng).unwrap();
    assert_eq!(cross.len(), 4);
    assert!(model.conditional_generate(0, 2, &x, true, &mut rng).is_err());
    assert!(model.conditional_generate(3, 0, &x, true, &mut rng).is_err());

    let mut zeroed = model.clone();
    zero_prefix(&mut zeroed.params, "dec0");
    zero_prefix(&mut zeroed.params, "dec1");
    assert_eq!(zeroed.conditional_generate(0, 1, &x, false, &mut rng).unwrap(), vec![0.0; 4]);
}

#[test]
fn self_generation_depends_only_on_encoder_mean_head_and_decoder() {
    let model = MultimodalModel::init(ModelConfig::new(vec![3, 4], Strategy::Mmvm), &RngStream::new(12)).unwrap();
    let x = vec![0.3, 0.2, -0.1];
    let before = model.conditional_generate(0, 0, &x, true, &mut RngStream::new(0)).unwrap();
    let mut other = model.clone();
    zero_prefix(&mut other.params, "enc1");
    zero_prefix(&mut other.params, "dec1");
    // scramble the logvar head of encoder 0
    let w = weight_name("enc0", 2);
    let mut head = other.params.get(&w).unwrap().clone();
    for r in 0..head.rows() {
        head.set(r, 2, 5.0);
        head.set(r, 3, -5.0);
    }
    other.params.set(&w, head).unwrap();
    let after = other.conditional_generate(0, 0, &x, true, &mut RngStream::new(0)).unwrap();
    assert_eq!(before, after);
}

#[test]
fn init_determinism_and_no_sharing() {
    let cfg = ModelConfig::new(vec![5, 5], Strategy::Mmvm);
    let a = MultimodalModel::init(cfg.clone(), &RngStream::new(3)).unwrap();
    let b = MultimodalModel::init(cfg.clone(), &RngStream::new(3)).unwrap();
    assert_eq!(a.params.to_le_bytes(), b.params.to_le_bytes());
    for (name, value) in a.params.subset("enc0.").iter() {
        if name.ends_with("weight") {
            assert_ne!(value, a.params.get(&name.replacen("enc0", "enc1", 1)).unwrap());
        }
    }
    for (name, value) in a.params.subset("dec0.").iter() {
        if name.ends_with("weight") {
            assert_ne!(value, a.params.get(&name.replacen("dec0", "dec1", 1)).unwrap());
        }
    }
}

#[test]
fn initial_stddev_is_near_one() {
    let cfg = ModelConfig::new(vec![20], Strategy::Independent);
    for seed in 0..100 {
        let model = MultimodalModel::init(cfg.clone(), &RngStream::new(seed)).unwrap();
        let x = RngStream::new(1000 + seed).normal_vec(20);
        let g = model.encode(0, &x).unwrap();
        assert!(g.stddev().iter().all(|&s| (0.5..=2.0).contains(&s)), "seed {seed}: {:?}", g.stddev());
    }
}

#[test]
fn reconstruct_is_invariant_to_modality_relabeling() {
    let model = MultimodalModel::init(ModelConfig::new(vec![3, 4], Strategy::Poe), &RngStream::new(1)).unwrap();
    let mut swapped_cfg = model.config.clone();
    swapped_cfg.input_dims = vec![4, 3];
    let mut swapped = ParameterSet::new();
    for (name, v) in model.params.iter() {
        let renamed = if name.starts_with("enc0") {
            name.replacen("enc0", "enc1", 1)
        } else if name.starts_with("enc1") {
            name.replacen("enc1", "enc0", 1)
        } else if name.starts_with("dec0") {
            name.replacen("dec0", "dec1", 1)
        } else {
            name.replacen("dec1", "dec0", 1)
        };
        swapped.insert(renamed, v.clone()).unwrap();
    }
    let swapped = MultimodalModel::from_parts(swapped_cfg, swapped).unwrap();
    let mut rng = RngStream::new(2);
    let xs = random_input(&mut rng, &[3, 4], 5);
    let noise = Noise::draw(&model.config, 5, &RngStream::new(3));
    let a = model.reconstruct_batch(&xs, &noise).unwrap();
    let b = swapped.reconstruct_batch(&[xs[1].clone(), xs[0].clone()], &noise).unwrap();
    for i in 0..5 {
        assert!((a.log_lik[0][i] - b.log_lik[1][i]).abs() < 1e-12);
        assert!((a.log_lik[1][i] - b.log_lik[0][i]).abs() < 1e-12);
    }
}

#[test]
fn identity_model_reconstructs_exactly_without_noise() {
    let model = identity_model(3, Strategy::Mmvm, 2);
    let xs = vec![Matrix::row_vector(vec![1.0, -2.0, 0.5]), Matrix::row_vector(vec![0.0, 3.0, -1.0])];
    let rec = model.reconstruct_batch(&xs, &Noise::zeros(&model.config, 1)).unwrap();
    assert_eq!(rec.locations[0][0], xs[0]);
    assert_eq!(rec.locations[1][0], xs[1]);
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let model = MultimodalModel::init(ModelConfig::new(vec![3, 2], Strategy::Mopoe), &RngStream::new(5)).unwrap();
    let ckpt = Checkpoint::new(model, 0.25, 5, 12, RngStream::new(5).split("x").state());
    let bytes = write_checkpoint(&ckpt).unwrap();
    assert_eq!(&bytes[..5], b"MMCK1");
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(write_checkpoint(&back).unwrap(), bytes);

    let err = read_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(read_checkpoint(&bytes[..7]), Err(Error::Format { .. })));
}
