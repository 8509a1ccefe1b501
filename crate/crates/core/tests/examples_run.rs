macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!("../examples/", stringify!($name), ".rs"));
        }

        #[test]
        fn $name() {
            $name::run_example();
        }
    };
}

example!(gradient_check);
example!(toy_decode);
example!(sink_concepts);
example!(grounding_maps);
example!(sage_oracle);
example!(chair_report);
example!(layer_analysis);
example!(corpus_pipeline);
