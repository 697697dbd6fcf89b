import pytest

from semlink import codec, dataset as ds, dqn, nn
from semlink.nn import Activation


@pytest.fixture(scope="session")
def synth():
    return ds.synth_generate(10, 20, 0.1, seed=1)


@pytest.fixture(scope="session")
def classifier(synth):
    model = nn.init_weights([1024, 10, 10], [Activation.RELU, Activation.SOFTMAX], seed=3)
    model, _ = nn.train(model, synth.X, synth.labels, 150, 32)
    return model


@pytest.fixture(scope="session")
def halves(classifier):
    return codec.split_model(classifier)


@pytest.fixture(scope="session")
def agent():
    from semlink.traffic import HighwayConfig
    qnet, _ = dqn.train_agent(dqn.AgentConfig(episodes=200), HighwayConfig(), seed=1)
    return qnet
