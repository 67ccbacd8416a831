"""MAE evaluation and the loss-combination ablation runner."""
