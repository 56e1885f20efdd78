#include <stdio.h>
#include "kenas.h"

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: %s GRAPH.json PROFILE\n", argv[0]);
        return 2;
    }
    KenasGraph *graph = NULL;
    KenasProfile *profile = NULL;
    KenasStatus st = kenas_graph_load(argv[1], &graph);
    if (st == KENAS_STATUS_OK) {
        st = kenas_profile_builtin(argv[2], &profile);
        if (st == KENAS_STATUS_INVALID_ARGUMENT)
            st = kenas_profile_load(argv[2], &profile);
    }
    double mj = 0.0, watts = 0.0;
    if (st == KENAS_STATUS_OK)
        st = kenas_estimate_energy(graph, NULL, profile, 1, &mj);
    if (st == KENAS_STATUS_OK)
        st = kenas_total_power(graph, NULL, profile, 1, &watts);
    if (st != KENAS_STATUS_OK) {
        fprintf(stderr, "error %d: %s\n", (int)st, kenas_last_error());
    } else {
        printf("%.6f mJ %.6f W\n", mj, watts);
    }
    kenas_profile_free(profile);
    kenas_graph_free(graph);
    return st == KENAS_STATUS_OK ? 0 : 1;
}
