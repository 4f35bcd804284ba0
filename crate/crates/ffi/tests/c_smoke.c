#include <stdio.h>
#include <string.h>

#include "ubfsim.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        return 64;
    }
    UbfScenario *scenario = NULL;
    UbfTrace *trace = NULL;
    UbfReport *report = NULL;
    if (ubf_scenario_load(argv[1], &scenario) != UBF_STATUS_OK ||
        ubf_run(scenario, 0, &trace) != UBF_STATUS_OK ||
        ubf_check(scenario, trace, &report) != UBF_STATUS_OK) {
        fprintf(stderr, "error: %s\n", ubf_last_error());
        return 1;
    }
    printf("records=%zu violations=%zu mediated=%zu\n", ubf_trace_len(trace), ubf_report_violations(report),
           ubf_report_mediated(report));

    UbfScenario *missing = NULL;
    UbfStatus st = ubf_scenario_load("/nonexistent.json", &missing);
    printf("missing=%d null=%d\n", (int)st, missing == NULL);

    ubf_report_free(report);
    ubf_trace_free(trace);
    ubf_scenario_free(scenario);
    return 0;
}
