use cf2net::model::{Cf2Net, EdgeHead, ModelConfig};
use cf2net::nn::{Ctx, Graph, Mode, ParamBuilder, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(size: usize) -> ModelConfig {
    ModelConfig {
        em_channels: 4,
        ..ModelConfig::desk(2, size)
    }
}

#[test]
fn pyramid_and_heads_have_the_documented_shapes() {
    let config = tiny(32);
    let (net, store) = Cf2Net::build(&config, 0).unwrap();
    let mut graph = Graph::inference();
    let x = graph.constant(Tensor::zeros([2, 2, 32, 32]));
    let mut ctx = Ctx {
        graph: &mut graph,
        store: &store,
        mode: Mode::Eval,
    };
    let out = net.forward(&mut ctx, &x).unwrap();
    for i in 0..4 {
        let want = [2, 2 << i, 32 >> i, 32 >> i];
        assert_eq!(out.pyramid.encoder[i].shape(), want);
        assert_eq!(out.pyramid.decoder[i].shape(), want);
        assert_eq!(
            out.predictions.edge_features[i].shape(),
            [2, 4, 32 >> i, 32 >> i]
        );
    }
    assert_eq!(out.pyramid.middle.shape(), [2, 32, 2, 2]);
    let p = &out.predictions;
    for map in [p.fusion.as_ref().unwrap(), &p.aux, p.edge.as_ref().unwrap()] {
        assert_eq!(map.shape(), [2, 1, 32, 32]);
    }
}

#[test]
fn wrong_inputs_are_rejected() {
    let (net, store) = Cf2Net::build(&tiny(32), 0).unwrap();
    assert!(net.predict(&store, Tensor::zeros([1, 1, 32, 32])).is_err());
    assert!(net.predict(&store, Tensor::zeros([1, 2, 48, 48])).is_err());
    let mut bad = tiny(40);
    assert!(Cf2Net::build(&bad, 0).is_err());
    bad.size = 32;
    bad.base_width = 0;
    assert!(Cf2Net::build(&bad, 0).is_err());
}

#[test]
fn build_is_deterministic_per_seed() {
    let (_, a) = Cf2Net::build(&tiny(32), 5).unwrap();
    let (_, b) = Cf2Net::build(&tiny(32), 5).unwrap();
    let (_, c) = Cf2Net::build(&tiny(32), 6).unwrap();
    let same = |x: &ParamStore, y: &ParamStore| x.ids().all(|id| x.get(id) == y.get(id));
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn zero_edge_head_gives_one_half() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = EdgeHead::new(&mut ParamBuilder::new(&mut store, &mut rng), 3);
    for id in head.conv().params() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut graph = Graph::inference();
    let ems: Vec<_> = (0..4)
        .map(|i| graph.constant(Tensor::full([1, 3, 16 >> i, 16 >> i], 1.5)))
        .collect();
    let mut ctx = Ctx {
        graph: &mut graph,
        store: &store,
        mode: Mode::Eval,
    };
    let out = head.forward(&mut ctx, &ems).unwrap();
    assert_eq!(out.shape(), [1, 1, 16, 16]);
    assert!(out.value().data().iter().all(|&v| v == 0.5));
}

#[test]
fn ablation_switches_remove_their_heads() {
    let plain = ModelConfig {
        use_fsp: false,
        use_aspp: false,
        use_ec: false,
        use_superpixel: false,
        backbone_skips: true,
        ..tiny(32)
    };
    let (net, store) = Cf2Net::build(&plain, 0).unwrap();
    let maps = net.predict(&store, Tensor::zeros([1, 1, 32, 32])).unwrap();
    assert!(maps.fusion.is_none() && maps.edge.is_none());

    let no_ec = ModelConfig {
        use_ec: false,
        ..tiny(32)
    };
    let (net, store) = Cf2Net::build(&no_ec, 0).unwrap();
    let maps = net.predict(&store, Tensor::zeros([1, 2, 32, 32])).unwrap();
    assert!(maps.fusion.is_some() && maps.edge.is_none());
}
