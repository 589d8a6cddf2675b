'''
Heterogeneous transferring prediction for irregular, event-ordered health
records: featurization, a from-scratch neural engine, autoencoder based
transfer between datasets and a reproducible ablation harness.
'''
