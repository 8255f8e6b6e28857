use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{finite_diff_check, AdamW, AdamWConfig, GradCheckConfig};

fn tiny(positional: PositionalScheme) -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        d_ff: 32,
        vocab_size: 140,
        regions: 8,
        d_roi: 6,
        positional,
        max_text_len: 16,
        max_target_len: 8,
        ..Default::default()
    }
}

fn regions(n: usize, d_roi: usize, image_id: usize, rng: &mut impl Rng) -> Vec<RegionInput> {
    (1..=n)
        .map(|k| {
            let x1: f32 = rng.gen_range(0.0..0.5);
            let y1: f32 = rng.gen_range(0.0..0.5);
            RegionInput {
                roi: (0..d_roi).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                bbox: [x1, y1, x1 + 0.3, y1 + 0.4],
                image_id,
                region_id: k,
            }
        })
        .collect()
}

fn words(cfg: &ModelConfig, rng: &mut impl Rng, n: usize) -> Vec<u32> {
    let lo = Vocab::reserved_count(cfg.regions) as u32;
    (0..n).map(|_| rng.gen_range(lo..cfg.vocab_size as u32)).collect()
}

fn rows(g: &Graph<f64>, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

#[test]
fn visual_sentinel_embeds_as_its_table_row() {
    let model = Model::<f64>::new(&tiny(PositionalScheme::RelativeBias), 1).unwrap();
    let vis3 = model.config().visual_token(3);
    let mut g = Graph::new();
    let e = model.net.embed_text(&mut g, &model.params, &[vis3]).unwrap();
    assert_eq!(g.value(e).row(0), model.params.by_name(EMBED).unwrap().row(vis3 as usize));
}

#[test]
fn position_signal_per_scheme() {
    for scheme in [PositionalScheme::RelativeBias, PositionalScheme::LearnedAbsolute] {
        let model = Model::<f64>::new(&tiny(scheme), 2).unwrap();
        let mut g = Graph::new();
        let e = model.net.embed_text(&mut g, &model.params, &[120, 120]).unwrap();
        let r = rows(&g, e);
        match scheme {
            PositionalScheme::RelativeBias => assert_eq!(r[0], r[1]),
            PositionalScheme::LearnedAbsolute => {
                let pos = model.params.by_name("encoder.embed_positions.weight").unwrap();
                for j in 0..16 {
                    assert_abs_diff_eq!(r[1][j] - r[0][j], pos.row(1)[j] - pos.row(0)[j], epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn out_of_range_ids_are_rejected() {
    let model = Model::<f32>::new(&tiny(PositionalScheme::RelativeBias), 2).unwrap();
    let mut g = Graph::new();
    assert!(model.net.embed_text(&mut g, &model.params, &[140]).is_err());
}

#[test]
fn zero_features_leave_image_and_sentinel_rows() {
    let model = Model::<f64>::new(&tiny(PositionalScheme::RelativeBias), 3).unwrap();
    let region = RegionInput {
        roi: vec![0.0; 6],
        bbox: [0.0; 4],
        image_id: 1,
        region_id: 5,
    };
    let mut g = Graph::new();
    let e = model.net.embed_visual(&mut g, &model.params, &[region]).unwrap();
    let img = model.params.by_name("visual.image_embed").unwrap().row(0);
    let row = model
        .params
        .by_name(EMBED)
        .unwrap()
        .row(model.config().visual_token(5) as usize);
    for j in 0..16 {
        assert_abs_diff_eq!(g.value(e).row(0)[j], img[j] + row[j], epsilon = 1e-12);
    }
}

#[test]
fn four_term_sum_by_hand() {
    let cfg = ModelConfig {
        d: 2,
        heads: 1,
        d_ff: 4,
        vocab_size: 120,
        regions: 4,
        d_roi: 2,
        ..Default::default()
    };
    let mut model = Model::<f64>::new(&cfg, 0).unwrap();
    let set = |m: &mut Model<f64>, name: &str, shape: &[usize], v: &[f64]| {
        let id = m.params.id(name).unwrap();
        *m.params.value_mut(id) = Tensor::from_f64(shape, v).unwrap();
    };
    set(&mut model, "visual.roi.weight", &[2, 2], &[1.0, 2.0, 0.0, 1.0]);
    set(&mut model, "visual.roi.bias", &[2], &[0.5, -0.5]);
    set(&mut model, "visual.box.weight", &[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    set(&mut model, "visual.box.bias", &[2], &[0.0, 0.25]);
    set(&mut model, "visual.image_embed", &[2, 2], &[0.1, 0.2, 0.3, 0.4]);
    let vis2 = cfg.visual_token(2) as usize;
    let embed = model.params.id(EMBED).unwrap();
    model.params.value_mut(embed).row_mut(vis2).copy_from_slice(&[10.0, 20.0]);
    let region = RegionInput {
        roi: vec![1.0, 3.0],
        bbox: [0.25, 0.5, 0.75, 1.0],
        image_id: 2,
        region_id: 2,
    };
    let mut g = Graph::new();
    let e = model.net.embed_visual(&mut g, &model.params, &[region]).unwrap();
    // roi: [1,3]·W = [1, 5] + [0.5,-0.5] = [1.5, 4.5]
    // box: [0.25+0.75, 0.5+1.0] + [0, 0.25] = [1.0, 1.75]
    // image 2: [0.3, 0.4]; sentinel row: [10, 20]
    let want = [1.5 + 1.0 + 0.3 + 10.0, 4.5 + 1.75 + 0.4 + 20.0];
    for j in 0..2 {
        assert_abs_diff_eq!(g.value(e).row(0)[j], want[j], epsilon = 1e-6);
    }
}

#[test]
fn wrong_roi_width_is_a_shape_error() {
    let model = Model::<f32>::new(&tiny(PositionalScheme::RelativeBias), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = regions(2, 5, 1, &mut rng);
    let mut g = Graph::new();
    assert!(matches!(
        model.net.embed_visual(&mut g, &model.params, &r),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn encoder_length_bookkeeping() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let model = Model::<f32>::new(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let one = EncoderInput {
        text: words(&cfg, &mut rng, 5),
        regions: regions(8, 6, 1, &mut rng),
    };
    let mut pair_regions = regions(8, 6, 1, &mut rng);
    pair_regions.extend(regions(8, 6, 2, &mut rng));
    let two = EncoderInput {
        text: words(&cfg, &mut rng, 3),
        regions: pair_regions,
    };
    let mut g = Graph::inference();
    let enc = model.net.encode(&mut g, &model.params, &[one]).unwrap();
    assert_eq!(enc.example_len(0), 13);
    assert_eq!(g.shape(enc.h), &[13, 16]);
    let enc = model.net.encode(&mut g, &model.params, &[two]).unwrap();
    assert_eq!(enc.example_len(0), 3 + 16);
}

#[test]
fn visual_only_encoding_runs() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let model = Model::<f32>::new(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = EncoderInput {
        text: Vec::new(),
        regions: regions(8, 6, 1, &mut rng),
    };
    let mut g = Graph::inference();
    let enc = model.net.encode(&mut g, &model.params, &[input]).unwrap();
    assert_eq!(enc.example_len(0), 8);
    assert!(g.value(enc.h).is_finite());
}

#[test]
fn padding_does_not_leak_into_real_rows() {
    let cfg = tiny(PositionalScheme::LearnedAbsolute);
    let model = Model::<f64>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = EncoderInput {
        text: words(&cfg, &mut rng, 3),
        regions: regions(8, 6, 1, &mut rng),
    };
    let b = EncoderInput {
        text: words(&cfg, &mut rng, 7),
        regions: regions(8, 6, 1, &mut rng),
    };
    let mut g = Graph::inference();
    let alone = model.net.encode(&mut g, &model.params, &[a.clone()]).unwrap();
    let alone_rows = rows(&g, alone.h);
    let both = model.net.encode(&mut g, &model.params, &[a, b]).unwrap();
    let both_rows = rows(&g, both.h);
    for i in 0..3 {
        for (x, y) in alone_rows[alone.text_row(0, i)].iter().zip(&both_rows[both.text_row(0, i)]) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }
    for j in 0..8 {
        for (x, y) in alone_rows[alone.visual_row(0, j)].iter().zip(&both_rows[both.visual_row(0, j)]) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }
}

#[test]
fn permuting_regions_permutes_visual_rows() {
    for scheme in [PositionalScheme::RelativeBias, PositionalScheme::LearnedAbsolute] {
        let cfg = tiny(scheme);
        let model = Model::<f64>::new(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let text = words(&cfg, &mut rng, 4);
        let regs = regions(8, 6, 1, &mut rng);
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let permuted: Vec<RegionInput> = perm.iter().map(|&i| regs[i].clone()).collect();
        let mut g = Graph::inference();
        let a = model
            .net
            .encode(&mut g, &model.params, &[EncoderInput { text: text.clone(), regions: regs }])
            .unwrap();
        let ra = rows(&g, a.h);
        let b = model
            .net
            .encode(&mut g, &model.params, &[EncoderInput { text, regions: permuted }])
            .unwrap();
        let rb = rows(&g, b.h);
        for i in 0..4 {
            for (x, y) in ra[i].iter().zip(&rb[i]) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
        for (slot, &src) in perm.iter().enumerate() {
            for (x, y) in ra[a.visual_row(0, src)].iter().zip(&rb[b.visual_row(0, slot)]) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
    }
}

#[test]
fn decoder_is_causal() {
    for scheme in [PositionalScheme::RelativeBias, PositionalScheme::LearnedAbsolute] {
        let cfg = tiny(scheme);
        let model = Model::<f64>::new(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = EncoderInput {
            text: words(&cfg, &mut rng, 4),
            regions: regions(8, 6, 1, &mut rng),
        };
        let prefix = {
            let mut p = vec![cfg.decoder_start()];
            p.extend(words(&cfg, &mut rng, 5));
            p
        };
        let logits_for = |p: &[u32]| {
            let mut g = Graph::inference();
            let enc = model.net.encode(&mut g, &model.params, &[input.clone()]).unwrap();
            let h = model.net.decode_hidden(&mut g, &model.params, &enc, &[p.to_vec()]).unwrap();
            let l = model.net.lm_logits(&mut g, &model.params, h, None).unwrap();
            rows(&g, l)
        };
        let base = logits_for(&prefix);
        for j in 1..prefix.len() {
            let mut edited = prefix.clone();
            edited[j] = if edited[j] == 130 { 131 } else { 130 };
            let other = logits_for(&edited);
            for pos in 0..prefix.len() {
                let same = base[pos] == other[pos];
                assert_eq!(same, pos < j, "scheme {scheme:?}, edit {j}, position {pos}");
            }
        }
    }
}

#[test]
fn prefix_longer_than_max_is_rejected() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let model = Model::<f32>::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = EncoderInput {
        text: words(&cfg, &mut rng, 4),
        regions: regions(8, 6, 1, &mut rng),
    };
    let mut g = Graph::inference();
    let enc = model.net.encode(&mut g, &model.params, &[input]).unwrap();
    assert!(model.net.decode_hidden(&mut g, &model.params, &enc, &[vec![0; 9]]).is_err());
}

#[test]
fn uniform_table_gives_uniform_distribution() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let mut model = Model::<f64>::new(&cfg, 8).unwrap();
    let id = model.params.id(EMBED).unwrap();
    *model.params.value_mut(id) = Tensor::full(&[140, 16], 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = EncoderInput {
        text: words(&cfg, &mut rng, 4),
        regions: regions(8, 6, 1, &mut rng),
    };
    let mut g = Graph::inference();
    let enc = model.net.encode(&mut g, &model.params, &[input]).unwrap();
    let h = model.net.decode_hidden(&mut g, &model.params, &enc, &[vec![0, 130, 131]]).unwrap();
    let l = model.net.lm_logits(&mut g, &model.params, h, None).unwrap();
    let p = g.softmax(l);
    for &v in g.value(p).data() {
        assert_abs_diff_eq!(v, 1.0 / 140.0, epsilon = 1e-9);
    }
}

#[test]
fn per_task_heads_start_as_the_shared_head() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let shared = Model::<f64>::new(&cfg, 9).unwrap();
    let mut per_task = shared.clone();
    per_task.add_task_heads(&["vqa".to_string(), "ground".to_string()]).unwrap();
    assert_eq!(per_task.num_parameters() - shared.num_parameters(), 2 * 140 * 16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![EncoderInput {
        text: words(&cfg, &mut rng, 4),
        regions: regions(8, 6, 1, &mut rng),
    }];
    let targets = vec![vec![130, 131, 2]];
    let loss = |m: &Model<f64>, task| {
        let mut g = Graph::inference();
        let l = m.net.generation_loss(&mut g, &m.params, &inputs, &targets, task).unwrap();
        g.value(l).data()[0]
    };
    assert_eq!(loss(&shared, Some("vqa")), loss(&per_task, Some("vqa")));
    assert_ne!(per_task.net.head_param(Some("vqa")), per_task.net.embed_id());
    assert_eq!(per_task.net.head_param(Some("caption")), per_task.net.embed_id());
}

#[test]
fn generation_loss_matches_manual_nll_and_ignores_padding() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let model = Model::<f64>::new(&cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = EncoderInput {
        text: words(&cfg, &mut rng, 4),
        regions: regions(8, 6, 1, &mut rng),
    };
    let target = vec![130, 125, 2];
    let mut g = Graph::inference();
    let loss = model
        .net
        .generation_loss(&mut g, &model.params, &[input.clone()], &[target.clone()], None)
        .unwrap();
    let loss = g.value(loss).data()[0];

    let enc = model.net.encode(&mut g, &model.params, &[input.clone()]).unwrap();
    let h = model.net.decode_hidden(&mut g, &model.params, &enc, &[vec![0, 130, 125]]).unwrap();
    let logits = model.net.lm_logits(&mut g, &model.params, h, None).unwrap();
    let r = rows(&g, logits);
    let mut manual = 0.0;
    for (pos, &y) in target.iter().enumerate() {
        let lse = r[pos].iter().map(|v| v.exp()).sum::<f64>().ln();
        manual += lse - r[pos][y as usize];
    }
    assert_abs_diff_eq!(loss, manual / 3.0, epsilon = 1e-10);

    // A longer companion target pads this one; its own NLL terms are unchanged.
    let other = EncoderInput {
        text: words(&cfg, &mut rng, 6),
        regions: regions(8, 6, 1, &mut rng),
    };
    let other_target = vec![131, 132, 133, 134, 135, 2];
    let both = model
        .net
        .generation_loss(&mut g, &model.params, &[input, other.clone()], &[target, other_target.clone()], None)
        .unwrap();
    let both = g.value(both).data()[0];
    let alone = model
        .net
        .generation_loss(&mut g, &model.params, &[other], &[other_target], None)
        .unwrap();
    let alone = g.value(alone).data()[0];
    assert_abs_diff_eq!(both, (3.0 * loss + 6.0 * alone) / 9.0, epsilon = 1e-10);
}

#[test]
fn bce_reference_values() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::zeros(&[1, 2]));
    let l = g.bce_with_logits(z, &[Some(1.0), Some(0.3)]).unwrap();
    // softplus(0) − s·0 = ln 2 for each candidate
    assert_abs_diff_eq!(g.value(l).data()[0], 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn discriminative_heads() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let mut model = Model::<f64>::new(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<EncoderInput> = (0..2)
        .map(|_| EncoderInput {
            text: words(&cfg, &mut rng, 4),
            regions: regions(8, 6, 1, &mut rng),
        })
        .collect();
    let mut g = Graph::new();
    assert!(model.net.discriminative_vqa_loss(&mut g, &model.params, &inputs, &[]).is_err());
    model.add_vqa_head(&mut rng, 5).unwrap();
    assert!(model.add_vqa_head(&mut rng, 6).is_err());
    for name in ["vqa_head.fc2.weight", "vqa_head.fc2.bias"] {
        let id = model.params.id(name).unwrap();
        model.params.value_mut(id).data_mut().fill(0.0);
    }
    let scores = vec![vec![Some(0.0); 5]; 2];
    let l = model.net.discriminative_vqa_loss(&mut g, &model.params, &inputs, &scores).unwrap();
    assert_abs_diff_eq!(g.value(l).data()[0], 5.0 * std::f64::consts::LN_2, epsilon = 1e-12);

    model.add_region_head(&mut rng).unwrap();
    let l = model.net.region_scoring_loss(&mut g, &model.params, &inputs, &[3, 8]).unwrap();
    assert!(g.value(l).data()[0].is_finite());
    assert!(model.net.region_scoring_loss(&mut g, &model.params, &inputs, &[0, 1]).is_err());
    assert!(model.net.region_scoring_loss(&mut g, &model.params, &inputs, &[9, 1]).is_err());
    for name in ["region_head.fc2.weight", "region_head.fc2.bias"] {
        let id = model.params.id(name).unwrap();
        model.params.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let l = model.net.region_scoring_loss(&mut g, &model.params, &inputs, &[3, 8]).unwrap();
    assert_abs_diff_eq!(g.value(l).data()[0], 8f64.ln(), epsilon = 1e-12);
}

#[test]
fn region_scores_permute_with_regions() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let mut model = Model::<f64>::new(&cfg, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    model.add_region_head(&mut rng).unwrap();
    let text = words(&cfg, &mut rng, 4);
    let regs = regions(8, 6, 1, &mut rng);
    let perm = [7usize, 6, 5, 4, 0, 1, 2, 3];
    let permuted: Vec<RegionInput> = perm.iter().map(|&i| regs[i].clone()).collect();
    let scores = |r: Vec<RegionInput>| {
        let mut g = Graph::inference();
        let enc = model
            .net
            .encode(&mut g, &model.params, &[EncoderInput { text: text.clone(), regions: r }])
            .unwrap();
        let l = model.net.region_logits(&mut g, &model.params, &enc).unwrap();
        let p = g.softmax(l);
        g.value(p).data().to_vec()
    };
    let a = scores(regs);
    let b = scores(permuted);
    assert_abs_diff_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
    for (slot, &src) in perm.iter().enumerate() {
        assert_abs_diff_eq!(a[src], b[slot], epsilon = 1e-10);
    }
}

#[test]
fn table_is_one_cell_through_every_alias() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let mut model = Model::<f32>::new(&cfg, 13).unwrap();
    let id = model.params.id(EMBED).unwrap();
    for alias in EMBED_ALIASES {
        assert_eq!(model.params.id(alias), Some(id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![EncoderInput {
        text: words(&cfg, &mut rng, 4),
        regions: regions(8, 6, 1, &mut rng),
    }];
    let mut g = Graph::new();
    let l = model
        .net
        .generation_loss(&mut g, &model.params, &inputs, &[vec![cfg.visual_token(2), 2]], None)
        .unwrap();
    g.backward(l).unwrap().accumulate_into(&mut model.params);
    let mut opt = AdamW::new(AdamWConfig::default());
    let ids = g.param_ids();
    opt.step_subset(&mut model.params, 1e-2, &ids).unwrap();
    let base = model.params.by_name(EMBED).unwrap().data().to_vec();
    for alias in EMBED_ALIASES {
        let v = model.params.by_name(alias).unwrap().data();
        assert!(v.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn sentinel_row_edit_reaches_region_and_head() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let mut model = Model::<f64>::new(&cfg, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let regs = regions(8, 6, 1, &mut rng);
    let hidden: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let probe = |m: &Model<f64>| {
        let mut g = Graph::inference();
        let e = m.net.embed_visual(&mut g, &m.params, &regs).unwrap();
        let h = g.constant(Tensor::new(&[1, 16], hidden.clone()).unwrap());
        let l = m.net.lm_logits(&mut g, &m.params, h, None).unwrap();
        (rows(&g, e), g.value(l).data().to_vec())
    };
    let (e0, l0) = probe(&model);
    let vis3 = cfg.visual_token(3) as usize;
    let delta: Vec<f64> = (0..16).map(|i| 0.1 * (i as f64 - 7.5)).collect();
    let id = model.params.id(EMBED).unwrap();
    for (w, dv) in model.params.value_mut(id).row_mut(vis3).iter_mut().zip(&delta) {
        *w += dv;
    }
    let (e1, l1) = probe(&model);
    for k in 0..8 {
        for j in 0..16 {
            let want = if k == 2 { delta[j] } else { 0.0 };
            assert_abs_diff_eq!(e1[k][j] - e0[k][j], want, epsilon = 1e-12);
        }
    }
    let dot: f64 = hidden.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>() / 4.0;
    for (t, (a, b)) in l0.iter().zip(&l1).enumerate() {
        let want = if t == vis3 { dot } else { 0.0 };
        assert_abs_diff_eq!(b - a, want, epsilon = 1e-12);
    }
}

#[test]
fn sentinel_gradient_flows_through_both_paths() {
    let cfg = tiny(PositionalScheme::RelativeBias);
    let mut model = Model::<f64>::new(&cfg, 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![EncoderInput {
        text: words(&cfg, &mut rng, 4),
        regions: regions(8, 6, 1, &mut rng),
    }];
    let vis3 = cfg.visual_token(3);
    let targets = vec![vec![vis3, 2]];
    let row_grad = |m: &Model<f64>| {
        let mut g = Graph::new();
        let l = m.net.generation_loss(&mut g, &m.params, &inputs, &targets, None).unwrap();
        let grads = g.backward(l).unwrap();
        let v = g.param(&m.params, m.net.embed_id());
        let d = 16;
        grads.wrt(v).unwrap()[vis3 as usize * d..(vis3 as usize + 1) * d].to_vec()
    };
    let full = row_grad(&model);
    model.net.uses = TableUses {
        text_input: false,
        region_ids: true,
        output_head: false,
    };
    let region = row_grad(&model);
    model.net.uses = TableUses {
        text_input: false,
        region_ids: false,
        output_head: true,
    };
    let head = row_grad(&model);
    model.net.uses = TableUses {
        text_input: true,
        region_ids: false,
        output_head: false,
    };
    let text = row_grad(&model);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&region) > 0.0);
    assert!(norm(&head) > 0.0);
    for j in 0..16 {
        assert_abs_diff_eq!(full[j], region[j] + head[j] + text[j], epsilon = 1e-12);
    }
}

#[test]
fn tiny_model_passes_gradient_check() {
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        d_ff: 8,
        vocab_size: 120,
        regions: 3,
        d_roi: 4,
        enc_layers: 1,
        dec_layers: 1,
        max_text_len: 8,
        max_target_len: 4,
        ..Default::default()
    };
    for scheme in [PositionalScheme::RelativeBias, PositionalScheme::LearnedAbsolute] {
        let mut model = Model::<f64>::new(&ModelConfig { positional: scheme, ..cfg.clone() }, 16).unwrap();
        // Nonzero relative-bias values so the bias path is exercised.
        for name in ["encoder.relative_bias", "decoder.relative_bias"] {
            if let Some(id) = model.params.id(name) {
                let mut r = ChaCha8Rng::seed_from_u64(1);
                for v in model.params.value_mut(id).data_mut() {
                    *v = r.gen_range(-0.5..0.5);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = vec![
            EncoderInput {
                text: vec![110, 111, 112],
                regions: regions(3, 4, 1, &mut rng),
            },
            EncoderInput {
                text: vec![113],
                regions: regions(3, 4, 1, &mut rng),
            },
        ];
        let targets = vec![vec![cfg.visual_token(2), 2], vec![114, 115, 2]];
        let net = model.net.clone();
        let report = finite_diff_check(&mut model.params, &GradCheckConfig::default(), |store, g| {
            net.generation_loss(g, store, &inputs, &targets, None)
        })
        .unwrap();
        assert!(report.passed(), "{scheme:?}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny(PositionalScheme::LearnedAbsolute);
    let mut model = Model::<f32>::new(&cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.add_task_heads(&["vqa".to_string()]).unwrap();
    model.add_region_head(&mut rng).unwrap();
    let state = serde_json::json!({"step": 3});
    let bytes = Checkpoint::to_bytes(&model, &state).unwrap();
    assert_eq!(&bytes[..4], b"UVLG");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    let (back, st) = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(st, state);
    assert_eq!(back.net.config, model.net.config);
    for (name, id) in model.params.names() {
        assert_eq!(back.params.by_name(name).unwrap(), model.params.value(id), "{name}");
    }
    assert_eq!(back.params.tying_groups(), model.params.tying_groups());
    assert_eq!(Checkpoint::to_bytes(&back, &state).unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
    assert!(Checkpoint::from_bytes(&bytes[..40]).is_err());
}
