import pytest

from stickertagger import GeneratorConfig, generate_synthetic


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """Shared 2000-item synthetic corpus (m=12, 64x64), generated once."""
    out = tmp_path_factory.mktemp("desk_corpus")
    cfg = GeneratorConfig(n_items=2000, tag_count=12, image_size=64, out_dir=str(out))
    ds = generate_synthetic(cfg, seed=13)
    return out, ds
