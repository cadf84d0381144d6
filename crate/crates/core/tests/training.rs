use herc::model::AblationMode;
use herc::train::{train, RunConfig};

#[test]
fn total_loss_trends_down_over_first_ten_epochs() {
    let mut config = RunConfig::from_json(include_str!("../../../configs/acceptance.json")).unwrap();
    config.epochs = 10;
    config.model.ablation = AblationMode::HgfMoa;
    let (_, outcome) = train(&config, &mut std::io::sink()).unwrap();
    let losses: Vec<f64> = outcome.log.iter().filter_map(|e| e.train.as_ref().map(|l| l.total)).collect();
    assert_eq!(losses.len(), 10);
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 2, "{losses:?}");
    assert!(losses[9] < losses[0], "{losses:?}");
}
