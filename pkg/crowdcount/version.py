import importlib.metadata

def get_version():
    """Get the installed version of crowdcount from package metadata.

    Returns:
        Version string, or "unknown" when the package is not installed
    """

    try:
        return importlib.metadata.version("crowdcount")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"
