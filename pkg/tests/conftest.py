import _live


def pytest_configure(config):
    _live.capture_manager = config.pluginmanager.getplugin("capturemanager")
