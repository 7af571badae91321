from app.core.dataset import Dataset, LGPError


class UnknownIdError(LGPError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


def filter_individuals(dataset: Dataset, ids=None, group=None, min_obs=None):
    """
    Select individuals by id, group label and minimum number of observation times.
    ids: iterable of individual ids; unknown ids raise UnknownIdError listing the available ones.
    Returns the selected ids in dataset order (all of them when no filter is given).
    """
    available = dataset.ids
    wanted = None
    if ids:
        wanted = [str(i).strip() for i in ids if str(i).strip()]
        unknown = [i for i in wanted if i not in set(available)]
        if unknown:
            shown = ", ".join(available[:20]) + (" ..." if len(available) > 20 else "")
            raise UnknownIdError(f"unknown id(s) {unknown}; available ids: {shown}")
        wanted = set(wanted)

    if group is not None and dataset.groups and str(group) not in dataset.groups:
        raise UnknownIdError(f"unknown group {group!r}; available groups: {list(dataset.groups)}")

    selected = []
    for series in dataset.individuals:
        # Id filter
        if wanted is not None and series.individual_id not in wanted:
            continue

        # Group filter
        if group is not None and series.group != str(group):
            continue

        # Observation-count filter
        if min_obs is not None and series.n_obs < min_obs:
            continue

        selected.append(series.individual_id)
    return selected
